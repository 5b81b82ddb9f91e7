//! Independent f64 reference implementations and the central-difference
//! harness.
//!
//! Everything here is an oracle: plain scalar loops in f64, written without
//! touching the tape. The forward semantics (layernorm epsilon, gelu form,
//! patch layout, loss definition) intentionally mirror the library's
//! contracts; the implementation path is separate so a bug in the tape
//! cannot hide in its own oracle. Finite differences run on the f64 path —
//! the documented shadow of the f32 implementation — which keeps the
//! quotient noise far below the 1e-3 acceptance tolerance.

#![allow(dead_code)]

use crossmodal_core::encoder::{EncoderModel, IdentifierKind, Modality, ModelConfig};

/// Central-difference step. The f32 design step is 1e-3; the f64 shadow
/// oracle can afford 1e-4, which keeps truncation error below tolerance for
/// the temperature-sharpened loss (third derivatives scale like 1/tau^3)
/// while quotient noise stays near 1e-10.
pub const FD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;

// ── Finite differences ──────────────────────────────────────────────────

/// Central finite differences of `f` at `x`.
pub fn central_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + eps;
        let up = f(&x);
        x[i] = keep - eps;
        let down = f(&x);
        x[i] = keep;
        grad[i] = (up - down) / (2.0 * eps);
    }
    grad
}

/// Worst elementwise relative error `|analytic - fd| / max(|analytic|, 1e-6)`.
/// The strict per-op formula: shallow graphs keep f32 noise far below the
/// 1e-6 floor.
pub fn max_rel_error(analytic: &[f32], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| (a as f64 - f).abs() / (a.abs() as f64).max(1e-6))
        .fold(0.0, f64::max)
}

/// Relative error of a full composed-model gradient. Elementwise
/// `|a - fd| <= rtol * |fd| + atol` scaled to a single worst ratio, where
/// `atol = 1e-6` absorbs the f32 accumulation noise floor on near-cancelling
/// elements, combined with the normwise relative error. Both must stay
/// below the tolerance.
pub fn full_grad_rel_error(analytic: &[f32], fd: &[f64], rtol: f64) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let atol = 1e-6;
    let elementwise = analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| (a as f64 - f).abs() / (f.abs() + atol / rtol))
        .fold(0.0, f64::max);
    let diff_norm: f64 = analytic
        .iter()
        .zip(fd)
        .map(|(&a, &f)| (a as f64 - f) * (a as f64 - f))
        .sum::<f64>()
        .sqrt();
    let fd_norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    elementwise.max(diff_norm / fd_norm)
}

// ── Scalar reference ops (f64) ──────────────────────────────────────────

pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

pub fn transpose_ref(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn softmax_row_ref(row: &[f64]) -> Vec<f64> {
    let denom: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v.exp() / denom).collect()
}

pub fn log_softmax_row_ref(row: &[f64]) -> Vec<f64> {
    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows_ref(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(softmax_row_ref(&x[r * cols..(r + 1) * cols]));
    }
    out
}

pub fn log_softmax_rows_ref(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        out.extend(log_softmax_row_ref(&x[r * cols..(r + 1) * cols]));
    }
    out
}

pub const LN_EPS: f64 = 1e-5;

pub fn layernorm_rows_ref(x: &[f64], gain: &[f64], bias: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mu = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - mu) * inv * gain[c] + bias[c];
        }
    }
    out
}

pub fn l2_normalize_rows_ref(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..cols {
            out[r * cols + c] = row[c] / norm;
        }
    }
    out
}

pub fn gelu_ref(x: f64) -> f64 {
    let coef = 0.044715;
    let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
    let u = sqrt_2_over_pi * (x + coef * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

// ── Reference loss (scalar double loop) ─────────────────────────────────

/// Eq-style symmetric contrastive loss via explicit loops: for every pair
/// both directional log-softmax terms, averaged over pairs.
pub fn scalar_loop_loss(z_i: &[Vec<f64>], z_t: &[Vec<f64>], tau: f64) -> f64 {
    let n = z_i.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        // image -> text
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&z_i[i], &z_t[j]) / tau).exp();
        }
        total += ((dot(&z_i[i], &z_t[i]) / tau).exp() / denom).ln();
        // text -> image
        let mut denom = 0.0;
        for j in 0..n {
            denom += (dot(&z_t[i], &z_i[j]) / tau).exp();
        }
        total += ((dot(&z_t[i], &z_i[i]) / tau).exp() / denom).ln();
    }
    -total / n as f64
}

// ── Brute-force retrieval ranking oracle ────────────────────────────────

/// Recall@k by explicitly sorting each row's candidates by (descending
/// similarity, ascending index) and locating the true column.
pub fn recall_oracle(sim: &[Vec<f64>], k: usize) -> f64 {
    let n = sim.len();
    let mut hits = 0;
    for (i, row) in sim.iter().enumerate() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            sim_cmp(row[b], row[a]).then(a.cmp(&b))
        });
        let rank = order.iter().position(|&j| j == i).unwrap() + 1;
        if rank <= k {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn sim_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap()
}

// ── Flat parameter view and the reference model forward ────────────────

/// Name -> (offset, shape) layout over one flat f64 parameter vector; the
/// layout is the model's public checkpoint interface.
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>, usize)>,
    pub total: usize,
}

impl ParamLayout {
    pub fn of(model: &EncoderModel) -> Self {
        let mut entries = Vec::new();
        let mut offset = 0;
        model.params.visit(&mut |name, t| {
            entries.push((name, t.shape().to_vec(), offset));
            offset += t.numel();
        });
        Self {
            entries,
            total: offset,
        }
    }

    /// Current model parameters flattened to f64.
    pub fn flatten(&self, model: &EncoderModel) -> Vec<f64> {
        let mut flat = vec![0.0; self.total];
        let mut offset = 0;
        model.params.visit(&mut |_, t| {
            for (slot, &v) in flat[offset..offset + t.numel()].iter_mut().zip(t.data()) {
                *slot = v as f64;
            }
            offset += t.numel();
        });
        flat
    }

    /// Analytic gradients (from a tape run) flattened in the same order;
    /// parameters without gradient contribute zeros.
    pub fn flatten_grads(
        &self,
        tape: &crossmodal_core::tape::Tape,
        bound: &crossmodal_core::encoder::ModelParams<crossmodal_core::tape::NodeId>,
    ) -> Vec<f32> {
        let mut flat = vec![0.0f32; self.total];
        let mut offset = 0;
        bound.visit(&mut |_, &id| {
            let numel = tape.value(id).numel();
            if let Some(g) = tape.grad(id) {
                flat[offset..offset + numel].copy_from_slice(g.data());
            }
            offset += numel;
        });
        flat
    }

    pub fn view<'a>(&'a self, data: &'a [f64]) -> ParamView<'a> {
        ParamView { layout: self, data }
    }
}

pub struct ParamView<'a> {
    layout: &'a ParamLayout,
    data: &'a [f64],
}

impl<'a> ParamView<'a> {
    pub fn get(&self, name: &str) -> &'a [f64] {
        let (_, shape, offset) = self
            .layout
            .entries
            .iter()
            .find(|(n, _, _)| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        let numel: usize = shape.iter().product();
        &self.data[*offset..offset + numel]
    }

    fn maybe(&self, name: &str) -> Option<&'a [f64]> {
        self.layout
            .entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, offset)| {
                let numel: usize = shape.iter().product();
                &self.data[*offset..offset + numel]
            })
    }
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Image => "image",
        Modality::Text => "text",
    }
}

/// Reference patch extraction: row-major patch grid, channel-major layout
/// within a patch.
pub fn patches_ref(image: &[f64], channels: usize, size: usize, patch: usize) -> Vec<Vec<f64>> {
    let per_side = size / patch;
    let mut out = Vec::with_capacity(per_side * per_side);
    for py in 0..per_side {
        for px in 0..per_side {
            let mut vec = Vec::with_capacity(patch * patch * channels);
            for ch in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        let row = py * patch + y;
                        let col = px * patch + x;
                        vec.push(image[ch * size * size + row * size + col]);
                    }
                }
            }
            out.push(vec);
        }
    }
    out
}

/// Full reference forward: one modality batch to unit-norm embeddings,
/// rows of `n x proj_dim`.
pub fn reference_embed(
    config: &ModelConfig,
    view: &ParamView,
    modality: Modality,
    images: &[Vec<f64>],
    captions: &[Vec<u32>],
) -> Vec<Vec<f64>> {
    let d_e = config.embed_dim;
    let d = config.embed_dim + config.modality_dim;
    let n = match modality {
        Modality::Image => images.len(),
        Modality::Text => captions.len(),
    };
    let mut out = Vec::with_capacity(n);
    for ex in 0..n {
        // content embedding, s x d_e
        let content: Vec<Vec<f64>> = match modality {
            Modality::Image => {
                let weight = view.get("image.weight");
                let pos = view.get("image.pos");
                let patches = patches_ref(&images[ex], config.channels, config.image_size, config.patch_size);
                let plen = config.patch_size * config.patch_size * config.channels;
                patches
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let projected = matmul_ref(p, weight, 1, plen, d_e);
                        (0..d_e).map(|c| projected[c] + pos[i * d_e + c]).collect()
                    })
                    .collect()
            }
            Modality::Text => {
                let table = view.get("text.weight");
                let pos = view.get("text.pos");
                captions[ex]
                    .iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        (0..d_e)
                            .map(|c| table[id as usize * d_e + c] + pos[i * d_e + c])
                            .collect()
                    })
                    .collect()
            }
        };
        // identifier + CLS
        let mname = modality_name(modality);
        let cls_prefix = if view.maybe("cls.embed").is_some() {
            "cls".to_string()
        } else {
            format!("cls.{mname}")
        };
        let cls_embed = view.get(&format!("{cls_prefix}.embed"));
        let cls_pos = view.get(&format!("{cls_prefix}.pos"));
        let mut cls_row: Vec<f64> = (0..d_e).map(|c| cls_embed[c] + cls_pos[c]).collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        match config.identifier {
            IdentifierKind::None => {
                rows.push(cls_row);
                rows.extend(content);
            }
            IdentifierKind::FeatureVector => {
                let v = view.get(&format!("identifier.{mname}"));
                cls_row.extend_from_slice(v);
                rows.push(cls_row);
                for mut row in content {
                    row.extend_from_slice(v);
                    rows.push(row);
                }
            }
            IdentifierKind::Token => {
                let tok = view.get(&format!("identifier.{mname}"));
                rows.push(cls_row);
                rows.push(tok.to_vec());
                rows.extend(content);
            }
        }
        // encoder stacks
        let s = rows.len();
        let mut h: Vec<f64> = rows.into_iter().flatten().collect();
        let stacks: [(String, usize); 3] = [
            (format!("early.{mname}"), config.layers_early),
            ("shared".to_string(), config.layers_shared),
            (format!("late.{mname}"), config.layers_late),
        ];
        for (prefix, count) in stacks {
            for layer in 0..count {
                h = reference_layer(config, view, &format!("{prefix}.{layer}"), &h, s, d);
            }
        }
        // pool and project
        let proj_name = if view.maybe("proj").is_some() {
            "proj".to_string()
        } else {
            format!("proj.{mname}")
        };
        let proj = view.get(&proj_name);
        let pooled = matmul_ref(&h[0..d], proj, 1, d, config.proj_dim);
        out.push(l2_normalize_rows_ref(&pooled, 1, config.proj_dim));
    }
    out
}

fn reference_layer(
    config: &ModelConfig,
    view: &ParamView,
    prefix: &str,
    x: &[f64],
    s: usize,
    d: usize,
) -> Vec<f64> {
    let p = |field: &str| view.get(&format!("{prefix}.{field}"));
    let heads = config.heads;
    let dh = d / heads;

    let normed = layernorm_rows_ref(x, p("ln1_gain"), p("ln1_bias"), s, d);
    let linear = |w: &[f64], b: &[f64], input: &[f64], cols: usize| -> Vec<f64> {
        let mut y = matmul_ref(input, w, s, d, cols);
        for r in 0..s {
            for c in 0..cols {
                y[r * cols + c] += b[c];
            }
        }
        y
    };
    let q = linear(p("wq"), p("bq"), &normed, d);
    let k = linear(p("wk"), p("bk"), &normed, d);
    let v = linear(p("wv"), p("bv"), &normed, d);

    let mut attn = vec![0.0; s * d];
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let col0 = h * dh;
        // scores s x s over this head's columns
        let mut scores = vec![0.0; s * s];
        for a in 0..s {
            for b in 0..s {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[a * d + col0 + c] * k[b * d + col0 + c];
                }
                scores[a * s + b] = dot * scale;
            }
        }
        let probs = softmax_rows_ref(&scores, s, s);
        for a in 0..s {
            for c in 0..dh {
                let mut acc = 0.0;
                for b in 0..s {
                    acc += probs[a * s + b] * v[b * d + col0 + c];
                }
                attn[a * d + col0 + c] = acc;
            }
        }
    }
    let attn = linear(p("wo"), p("bo"), &attn, d);
    let x1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();

    let normed2 = layernorm_rows_ref(&x1, p("ln2_gain"), p("ln2_bias"), s, d);
    let hidden = config.mlp_ratio * d;
    let mut up = matmul_ref(&normed2, p("w_up"), s, d, hidden);
    let b_up = p("b_up");
    for r in 0..s {
        for c in 0..hidden {
            up[r * hidden + c] = gelu_ref(up[r * hidden + c] + b_up[c]);
        }
    }
    let mut down = matmul_ref(&up, p("w_down"), s, hidden, d);
    let b_down = p("b_down");
    for r in 0..s {
        for c in 0..d {
            down[r * d + c] += b_down[c];
        }
    }
    x1.iter().zip(&down).map(|(a, b)| a + b).collect()
}

/// Reference end-to-end loss for a batch, as a function of the flat
/// parameter vector.
pub fn reference_loss(
    config: &ModelConfig,
    layout: &ParamLayout,
    flat: &[f64],
    images: &[Vec<f64>],
    captions: &[Vec<u32>],
) -> f64 {
    let view = layout.view(flat);
    let z_i = reference_embed(config, &view, Modality::Image, images, captions);
    let z_t = reference_embed(config, &view, Modality::Text, images, captions);
    let log_tau = view.get("log_tau")[0];
    scalar_loop_loss(&z_i, &z_t, log_tau.exp())
}

// ── End-to-end FD drivers (shared by the gradient and acceptance suites) ─

/// Synthetic batch for FD runs: images in [0, 1], captions of the model's
/// full sequence length.
pub fn fd_batch(config: &ModelConfig, seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<Vec<u32>>) {
    let pixels = config.channels * config.image_size * config.image_size;
    let images: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            pseudo_values(pixels, seed * 31 + i as u64, 0.5)
                .into_iter()
                .map(|v| v + 0.5)
                .collect()
        })
        .collect();
    let captions: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            pseudo_values(config.max_seq_len, seed * 77 + i as u64, 1.0)
                .into_iter()
                .map(|v| (((v + 1.0) / 2.0) * config.vocab_size as f64) as u32 % config.vocab_size as u32)
                .collect()
        })
        .collect();
    (images, captions)
}

/// Worst relative error between the tape's parameter gradients of the full
/// contrastive loss and central differences on the f64 reference.
pub fn full_loss_fd_max_err(config: &ModelConfig, seed: u64, n: usize) -> f64 {
    use crossmodal_core::objective::contrastive_loss_graph;
    use crossmodal_core::tape::Tape;
    use crossmodal_core::Tensor;

    let model = EncoderModel::init(config.clone(), seed).expect("valid config");
    let layout = ParamLayout::of(&model);
    let (images, captions) = fd_batch(config, seed, n);

    // analytic path
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let image_tensors: Vec<Tensor> = images
        .iter()
        .map(|img| {
            Tensor::new(
                vec![config.channels, config.image_size, config.image_size],
                img.iter().map(|&v| v as f32).collect(),
            )
            .unwrap()
        })
        .collect();
    let caption_slices: Vec<&[u32]> = captions.iter().map(|c| c.as_slice()).collect();
    let z_i = bound.forward_images(&mut tape, &image_tensors).unwrap();
    let z_t = bound.forward_texts(&mut tape, &caption_slices).unwrap();
    let loss = contrastive_loss_graph(&mut tape, z_i, z_t, bound.params.log_tau).unwrap();
    let loss_value = tape.value(loss).item() as f64;
    tape.backward(loss).unwrap();
    let analytic = layout.flatten_grads(&tape, &bound.params);

    // oracle path: forward values must agree before gradients mean anything
    let flat = layout.flatten(&model);
    let ref_loss = reference_loss(config, &layout, &flat, &images, &captions);
    assert!(
        (loss_value - ref_loss).abs() < 1e-4,
        "forward disagreement: tape {loss_value} vs reference {ref_loss}"
    );

    let mut f = |x: &[f64]| reference_loss(config, &layout, x, &images, &captions);
    let fd = central_fd(&mut f, &flat, FD_EPS);
    full_grad_rel_error(&analytic, &fd, GRAD_TOL)
}

/// Worst relative error for a weighted pooled text embedding (end-to-end
/// through embed, identifier, encoder and pooling).
pub fn pooled_output_fd_max_err(config: &ModelConfig, seed: u64) -> f64 {
    use crossmodal_core::tape::Tape;

    let model = EncoderModel::init(config.clone(), seed).expect("valid config");
    let layout = ParamLayout::of(&model);
    let caption: Vec<u32> = (0..config.max_seq_len)
        .map(|i| (i % config.vocab_size) as u32)
        .collect();
    let weights = pseudo_values(config.proj_dim, seed + 5, 1.0);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let z = bound
        .forward_texts(&mut tape, &[caption.as_slice()])
        .unwrap();
    let w = tape.input(
        crossmodal_core::Tensor::matrix(1, config.proj_dim, weights.iter().map(|&v| v as f32).collect())
            .unwrap(),
    );
    let weighted = tape.mul(z, w).unwrap();
    let scalar = tape.sum(weighted);
    tape.backward(scalar).unwrap();
    let analytic = layout.flatten_grads(&tape, &bound.params);

    let flat = layout.flatten(&model);
    let captions = vec![caption];
    let mut f = |x: &[f64]| {
        let view = layout.view(x);
        let z = reference_embed(config, &view, Modality::Text, &[], &captions);
        z[0].iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let fd = central_fd(&mut f, &flat, FD_EPS);
    max_rel_error(&analytic, &fd)
}

/// Deterministic pseudo-random values for test inputs (no external RNG so
/// oracle inputs are frozen in code).
pub fn pseudo_values(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            state ^= state >> 12;
            state ^= state << 25;
            state ^= state >> 27;
            let unit = (state.wrapping_mul(0x2545f4914f6cdd1d) >> 11) as f64
                / (1u64 << 53) as f64;
            (unit * 2.0 - 1.0) * scale
        })
        .collect()
}

pub fn pseudo_values_f32(n: usize, seed: u64, scale: f64) -> Vec<f32> {
    pseudo_values(n, seed, scale)
        .into_iter()
        .map(|v| v as f32)
        .collect()
}
