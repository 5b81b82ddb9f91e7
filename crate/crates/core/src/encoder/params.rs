//! Parameter containers, generic over the storage type.
//!
//! The same structs hold owned [`Tensor`]s in a persistent model and
//! [`NodeId`]s once registered on a tape for one forward/backward pass.
//! `visit` walks every parameter in a fixed order with a stable dotted name;
//! that order defines the checkpoint layout and the optimizer state layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{IdentifierKind, Modality, ModelConfig};
use crate::tape::{NodeId, Tape};
use crate::Tensor;

/// Initial temperature; stored as its logarithm so positivity is structural.
pub const INIT_TEMPERATURE: f32 = 0.07;
/// Standard deviation for embedding and linear weight initialization.
pub const INIT_STD: f32 = 0.02;

/// Pair of per-modality values.
#[derive(Debug, Clone)]
pub struct PerModality<T> {
    pub image: T,
    pub text: T,
}

impl<T> PerModality<T> {
    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Image => &mut self.image,
            Modality::Text => &mut self.text,
        }
    }
}

/// Either one value shared by both modalities or one value per modality.
#[derive(Debug, Clone)]
pub enum Shareable<T> {
    Shared(T),
    PerModality(PerModality<T>),
}

impl<T> Shareable<T> {
    pub fn for_modality(&self, m: Modality) -> &T {
        match self {
            Shareable::Shared(v) => v,
            Shareable::PerModality(p) => p.get(m),
        }
    }
}

/// Content embedder: a lookup/projection table plus a positional table.
/// For text `weight` is the `vocab x d_e` token table; for images it is the
/// `(patch^2 * channels) x d_e` patch projection.
#[derive(Debug, Clone)]
pub struct EmbedderParams<T> {
    pub weight: T,
    pub pos: T,
}

/// CLS token: content embedding plus its own positional offset, both `d_e`.
#[derive(Debug, Clone)]
pub struct ClsParams<T> {
    pub embed: T,
    pub pos: T,
}

/// Learned modality identity: a `d_m` feature vector or a full-width token
/// embedding per modality.
#[derive(Debug, Clone)]
pub enum IdentifierParams<T> {
    None,
    FeatureVector(PerModality<T>),
    Token(PerModality<T>),
}

/// One pre-layernorm transformer layer of width `d`.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

impl<T> LayerParams<T> {
    fn fields(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut T); 16] {
        [
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
            ("w_up", &mut self.w_up),
            ("b_up", &mut self.b_up),
            ("w_down", &mut self.w_down),
            ("b_down", &mut self.b_down),
        ]
    }
}

/// Every trainable tensor of an encoder model.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub text_embedder: EmbedderParams<T>,
    pub image_embedder: EmbedderParams<T>,
    pub cls: Shareable<ClsParams<T>>,
    pub identifier: IdentifierParams<T>,
    pub early: PerModality<Vec<LayerParams<T>>>,
    pub shared: Vec<LayerParams<T>>,
    pub late: PerModality<Vec<LayerParams<T>>>,
    pub projection: Shareable<T>,
    pub log_tau: T,
}

impl<T> ModelParams<T> {
    /// Walk every parameter in checkpoint order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("text.weight".into(), &self.text_embedder.weight);
        f("text.pos".into(), &self.text_embedder.pos);
        f("image.weight".into(), &self.image_embedder.weight);
        f("image.pos".into(), &self.image_embedder.pos);
        match &self.cls {
            Shareable::Shared(c) => {
                f("cls.embed".into(), &c.embed);
                f("cls.pos".into(), &c.pos);
            }
            Shareable::PerModality(p) => {
                for m in Modality::ALL {
                    let c = p.get(m);
                    f(format!("cls.{}.embed", m.name()), &c.embed);
                    f(format!("cls.{}.pos", m.name()), &c.pos);
                }
            }
        }
        match &self.identifier {
            IdentifierParams::None => {}
            IdentifierParams::FeatureVector(p) | IdentifierParams::Token(p) => {
                for m in Modality::ALL {
                    f(format!("identifier.{}", m.name()), p.get(m));
                }
            }
        }
        for m in Modality::ALL {
            for (i, layer) in self.early.get(m).iter().enumerate() {
                for (name, t) in layer.fields() {
                    f(format!("early.{}.{i}.{name}", m.name()), t);
                }
            }
        }
        for (i, layer) in self.shared.iter().enumerate() {
            for (name, t) in layer.fields() {
                f(format!("shared.{i}.{name}"), t);
            }
        }
        for m in Modality::ALL {
            for (i, layer) in self.late.get(m).iter().enumerate() {
                for (name, t) in layer.fields() {
                    f(format!("late.{}.{i}.{name}", m.name()), t);
                }
            }
        }
        match &self.projection {
            Shareable::Shared(p) => f("proj".into(), p),
            Shareable::PerModality(p) => {
                for m in Modality::ALL {
                    f(format!("proj.{}", m.name()), p.get(m));
                }
            }
        }
        f("log_tau".into(), &self.log_tau);
    }

    /// Parameter names in `visit` order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name));
        names
    }

    /// Mutable references to every parameter in `visit` order.
    pub fn fields_mut_in_order(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        out.push(&mut self.text_embedder.weight);
        out.push(&mut self.text_embedder.pos);
        out.push(&mut self.image_embedder.weight);
        out.push(&mut self.image_embedder.pos);
        match &mut self.cls {
            Shareable::Shared(c) => {
                out.push(&mut c.embed);
                out.push(&mut c.pos);
            }
            Shareable::PerModality(p) => {
                out.push(&mut p.image.embed);
                out.push(&mut p.image.pos);
                out.push(&mut p.text.embed);
                out.push(&mut p.text.pos);
            }
        }
        match &mut self.identifier {
            IdentifierParams::None => {}
            IdentifierParams::FeatureVector(p) | IdentifierParams::Token(p) => {
                out.push(&mut p.image);
                out.push(&mut p.text);
            }
        }
        for layer in self.early.image.iter_mut().chain(self.early.text.iter_mut()) {
            for (_, t) in layer.fields_mut() {
                out.push(t);
            }
        }
        for layer in self.shared.iter_mut() {
            for (_, t) in layer.fields_mut() {
                out.push(t);
            }
        }
        for layer in self.late.image.iter_mut().chain(self.late.text.iter_mut()) {
            for (_, t) in layer.fields_mut() {
                out.push(t);
            }
        }
        match &mut self.projection {
            Shareable::Shared(p) => out.push(p),
            Shareable::PerModality(p) => {
                out.push(&mut p.image);
                out.push(&mut p.text);
            }
        }
        out.push(&mut self.log_tau);
        out
    }

    /// Mutable walk in the same order as [`visit`](Self::visit).
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        let names = self.names();
        let fields = self.fields_mut_in_order();
        debug_assert_eq!(names.len(), fields.len());
        for (name, t) in names.into_iter().zip(fields) {
            f(name, t);
        }
    }
}

impl ModelParams<Tensor> {
    /// Register every parameter on a tape, producing the id mirror used for
    /// one forward/backward pass. Traversal order matches `visit`.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        let bind_embedder = |tape: &mut Tape, e: &EmbedderParams<Tensor>| EmbedderParams {
            weight: tape.param(e.weight.clone()),
            pos: tape.param(e.pos.clone()),
        };
        let bind_cls = |tape: &mut Tape, c: &ClsParams<Tensor>| ClsParams {
            embed: tape.param(c.embed.clone()),
            pos: tape.param(c.pos.clone()),
        };
        let bind_stack = |tape: &mut Tape, layers: &[LayerParams<Tensor>]| {
            layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: tape.param(l.ln1_gain.clone()),
                    ln1_bias: tape.param(l.ln1_bias.clone()),
                    wq: tape.param(l.wq.clone()),
                    bq: tape.param(l.bq.clone()),
                    wk: tape.param(l.wk.clone()),
                    bk: tape.param(l.bk.clone()),
                    wv: tape.param(l.wv.clone()),
                    bv: tape.param(l.bv.clone()),
                    wo: tape.param(l.wo.clone()),
                    bo: tape.param(l.bo.clone()),
                    ln2_gain: tape.param(l.ln2_gain.clone()),
                    ln2_bias: tape.param(l.ln2_bias.clone()),
                    w_up: tape.param(l.w_up.clone()),
                    b_up: tape.param(l.b_up.clone()),
                    w_down: tape.param(l.w_down.clone()),
                    b_down: tape.param(l.b_down.clone()),
                })
                .collect::<Vec<_>>()
        };
        ModelParams {
            text_embedder: bind_embedder(tape, &self.text_embedder),
            image_embedder: bind_embedder(tape, &self.image_embedder),
            cls: match &self.cls {
                Shareable::Shared(c) => Shareable::Shared(bind_cls(tape, c)),
                Shareable::PerModality(p) => Shareable::PerModality(PerModality {
                    image: bind_cls(tape, &p.image),
                    text: bind_cls(tape, &p.text),
                }),
            },
            identifier: match &self.identifier {
                IdentifierParams::None => IdentifierParams::None,
                IdentifierParams::FeatureVector(p) => {
                    IdentifierParams::FeatureVector(PerModality {
                        image: tape.param(p.image.clone()),
                        text: tape.param(p.text.clone()),
                    })
                }
                IdentifierParams::Token(p) => IdentifierParams::Token(PerModality {
                    image: tape.param(p.image.clone()),
                    text: tape.param(p.text.clone()),
                }),
            },
            early: PerModality {
                image: bind_stack(tape, &self.early.image),
                text: bind_stack(tape, &self.early.text),
            },
            shared: bind_stack(tape, &self.shared),
            late: PerModality {
                image: bind_stack(tape, &self.late.image),
                text: bind_stack(tape, &self.late.text),
            },
            projection: match &self.projection {
                Shareable::Shared(p) => Shareable::Shared(tape.param(p.clone())),
                Shareable::PerModality(p) => Shareable::PerModality(PerModality {
                    image: tape.param(p.image.clone()),
                    text: tape.param(p.text.clone()),
                }),
            },
            log_tau: tape.param(self.log_tau.clone()),
        }
    }
}

/// Seeded initialization: normal(0, 0.02) for embeddings and linear weights,
/// zeros for biases, ones for layernorm gains, log(0.07) for the temperature.
/// Sampling order is the `visit` order, so a seed pins every weight.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_e = config.embed_dim;
    let d = config.width();

    let text_embedder = EmbedderParams {
        weight: sample_weight(&mut rng, vec![config.vocab_size, d_e]),
        pos: sample_weight(&mut rng, vec![config.max_seq_len, d_e]),
    };
    let image_embedder = EmbedderParams {
        weight: sample_weight(&mut rng, vec![config.patch_vec_len(), d_e]),
        pos: sample_weight(&mut rng, vec![config.num_patches(), d_e]),
    };
    let cls = if config.per_modality_head {
        Shareable::PerModality(PerModality {
            image: sample_cls(&mut rng, d_e),
            text: sample_cls(&mut rng, d_e),
        })
    } else {
        Shareable::Shared(sample_cls(&mut rng, d_e))
    };
    let identifier = match config.identifier {
        IdentifierKind::None => IdentifierParams::None,
        IdentifierKind::FeatureVector => IdentifierParams::FeatureVector(PerModality {
            image: sample_weight(&mut rng, vec![config.modality_dim]),
            text: sample_weight(&mut rng, vec![config.modality_dim]),
        }),
        IdentifierKind::Token => IdentifierParams::Token(PerModality {
            image: sample_weight(&mut rng, vec![d]),
            text: sample_weight(&mut rng, vec![d]),
        }),
    };
    let early = PerModality {
        image: sample_stack(&mut rng, config, config.layers_early),
        text: sample_stack(&mut rng, config, config.layers_early),
    };
    let shared = sample_stack(&mut rng, config, config.layers_shared);
    let late = PerModality {
        image: sample_stack(&mut rng, config, config.layers_late),
        text: sample_stack(&mut rng, config, config.layers_late),
    };
    let projection = if config.per_modality_head {
        Shareable::PerModality(PerModality {
            image: sample_weight(&mut rng, vec![d, config.proj_dim]),
            text: sample_weight(&mut rng, vec![d, config.proj_dim]),
        })
    } else {
        Shareable::Shared(sample_weight(&mut rng, vec![d, config.proj_dim]))
    };
    ModelParams {
        text_embedder,
        image_embedder,
        cls,
        identifier,
        early,
        shared,
        late,
        projection,
        log_tau: Tensor::scalar(INIT_TEMPERATURE.ln()),
    }
}

fn sample_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn sample_cls(rng: &mut ChaCha8Rng, d_e: usize) -> ClsParams<Tensor> {
    ClsParams {
        embed: sample_weight(rng, vec![d_e]),
        pos: sample_weight(rng, vec![d_e]),
    }
}

fn sample_layer(rng: &mut ChaCha8Rng, config: &ModelConfig) -> LayerParams<Tensor> {
    let d = config.width();
    let hidden = config.mlp_ratio * d;
    LayerParams {
        ln1_gain: Tensor::ones(vec![d]),
        ln1_bias: Tensor::zeros(vec![d]),
        wq: sample_weight(rng, vec![d, d]),
        bq: Tensor::zeros(vec![d]),
        wk: sample_weight(rng, vec![d, d]),
        bk: Tensor::zeros(vec![d]),
        wv: sample_weight(rng, vec![d, d]),
        bv: Tensor::zeros(vec![d]),
        wo: sample_weight(rng, vec![d, d]),
        bo: Tensor::zeros(vec![d]),
        ln2_gain: Tensor::ones(vec![d]),
        ln2_bias: Tensor::zeros(vec![d]),
        w_up: sample_weight(rng, vec![d, hidden]),
        b_up: Tensor::zeros(vec![hidden]),
        w_down: sample_weight(rng, vec![hidden, d]),
        b_down: Tensor::zeros(vec![d]),
    }
}

fn sample_stack(rng: &mut ChaCha8Rng, config: &ModelConfig, n: usize) -> Vec<LayerParams<Tensor>> {
    (0..n).map(|_| sample_layer(rng, config)).collect()
}
