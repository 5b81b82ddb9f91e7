//! Multimodal encoder: per-modality embedders, modality-identity injection,
//! and the shared / modality-specific transformer stacks.
//!
//! Every modality is first turned into a sequence of `d_e`-wide content
//! embeddings. Under the feature-vector identifier a learned `d_m` vector is
//! appended to every row, bringing the width to `d = d_e + d_m`; under the
//! token identifier a learned full-width token is prepended instead. A shared
//! CLS token leads the sequence, the stacks run early-specific, shared, then
//! late-specific layers, and the final CLS representation is projected and
//! l2-normalized into the joint embedding space.

mod config;
mod params;

pub use config::{
    default_modality_dim, per_layer_params, IdentifierKind, Modality, ModalitySpec, ModelConfig,
    ParamBreakdown,
};
pub use params::{
    init_params, ClsParams, EmbedderParams, IdentifierParams, LayerParams, ModelParams,
    PerModality, Shareable, INIT_STD, INIT_TEMPERATURE,
};

use crate::tape::{NodeId, Tape};
use crate::{Error, Result, Tensor};

/// Parameter store plus architecture config.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl EncoderModel {
    /// Build a freshly initialized model. The seed pins every weight.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self { config, params })
    }

    /// Register all parameters on `tape` for one forward/backward pass.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> BoundModel<'a> {
        BoundModel {
            config: &self.config,
            params: self.params.bind(tape),
        }
    }

    /// Closed-form trainable-scalar count per component.
    pub fn count_params(&self) -> ParamBreakdown {
        self.config.count_params()
    }
}

/// A model whose parameters are registered on a tape. All forward ops live
/// here; node ids returned by one `bind` are only valid on that tape.
pub struct BoundModel<'a> {
    pub config: &'a ModelConfig,
    pub params: ModelParams<NodeId>,
}

/// Flatten an image into a `num_patches x (patch^2 * channels)` matrix.
///
/// Patches are ordered row-major over the patch grid, so the top-left patch
/// maps to row 0. Within a patch the layout is channel-major: index
/// `ch * patch^2 + y * patch + x`.
pub fn image_to_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Input(format!(
            "image must be rank 3 (channels x height x width), got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Input(format!(
            "image {h}x{w} not divisible into {patch}x{patch} patches"
        )));
    }
    let (ph, pw) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let mut data = Vec::with_capacity(ph * pw * plen);
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        let row = py * patch + y;
                        let col = px * patch + x;
                        data.push(image.data()[ch * h * w + row * w + col]);
                    }
                }
            }
        }
    }
    Tensor::matrix(ph * pw, plen, data)
}

impl BoundModel<'_> {
    /// Encoder width `d`.
    fn width(&self) -> usize {
        self.config.width()
    }

    /// Content embedding for a token sequence: token table lookup plus
    /// positional embedding, `s x d_e`.
    pub fn embed_text(&self, tape: &mut Tape, token_ids: &[u32]) -> Result<NodeId> {
        self.embed_text_batch(tape, &[token_ids])
    }

    /// Batched text embedding; all captions must share one length. Output is
    /// the row-stacked `(n * s) x d_e` content matrix.
    pub fn embed_text_batch(&self, tape: &mut Tape, captions: &[&[u32]]) -> Result<NodeId> {
        let s = match captions.first() {
            None => return Err(Error::Input("embed_text: empty batch".into())),
            Some(first) => first.len(),
        };
        if s == 0 {
            return Err(Error::Input("embed_text: empty sequence (s >= 1 required)".into()));
        }
        if s > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "embed_text: sequence length {s} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut token_idx = Vec::with_capacity(captions.len() * s);
        let mut pos_idx = Vec::with_capacity(captions.len() * s);
        for caption in captions {
            if caption.len() != s {
                return Err(Error::Input(format!(
                    "embed_text: ragged batch ({} vs {s} tokens)",
                    caption.len()
                )));
            }
            for (p, &id) in caption.iter().enumerate() {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::Input(format!(
                        "embed_text: token id {id} out of vocabulary (size {})",
                        self.config.vocab_size
                    )));
                }
                token_idx.push(id as usize);
                pos_idx.push(p);
            }
        }
        let tokens = tape.gather_rows(self.params.text_embedder.weight, &token_idx)?;
        let pos = tape.gather_rows(self.params.text_embedder.pos, &pos_idx)?;
        tape.add(tokens, pos)
    }

    /// Content embedding for one image: patch projection plus positional
    /// embedding, `num_patches x d_e`.
    pub fn embed_image(&self, tape: &mut Tape, image: &Tensor) -> Result<NodeId> {
        self.embed_image_batch(tape, std::slice::from_ref(image))
    }

    /// Batched image embedding, `(n * num_patches) x d_e`.
    pub fn embed_image_batch(&self, tape: &mut Tape, images: &[Tensor]) -> Result<NodeId> {
        if images.is_empty() {
            return Err(Error::Input("embed_image: empty batch".into()));
        }
        let cfg = self.config;
        let expect = [cfg.channels, cfg.image_size, cfg.image_size];
        let s = cfg.num_patches();
        let plen = cfg.patch_vec_len();
        let mut data = Vec::with_capacity(images.len() * s * plen);
        for image in images {
            if image.shape() != expect {
                return Err(Error::Input(format!(
                    "embed_image: image shape {:?} does not match configured {:?}",
                    image.shape(),
                    expect
                )));
            }
            data.extend_from_slice(image_to_patches(image, cfg.patch_size)?.data());
        }
        let patches = tape.input(Tensor::matrix(images.len() * s, plen, data)?);
        let projected = tape.matmul(patches, self.params.image_embedder.weight)?;
        let pos_idx: Vec<usize> = (0..images.len()).flat_map(|_| 0..s).collect();
        let pos = tape.gather_rows(self.params.image_embedder.pos, &pos_idx)?;
        tape.add(projected, pos)
    }

    /// Append the learned modality vector to every row:
    /// `s x d_e -> s x (d_e + d_m)`.
    pub fn attach_modality_vector(
        &self,
        tape: &mut Tape,
        seq: NodeId,
        modality: Modality,
    ) -> Result<NodeId> {
        let IdentifierParams::FeatureVector(v) = &self.params.identifier else {
            return Err(Error::Config(
                "attach_modality_vector requires the feature-vector identifier".into(),
            ));
        };
        let rows = tape.value(seq).rows();
        let modality_cols = tape.broadcast_row(*v.get(modality), rows)?;
        tape.concat_cols(seq, modality_cols)
    }

    /// Prepend the CLS row (and the modality token when configured):
    /// `s x d -> s' x d` with `s' = s + 2` under the token identifier and
    /// `s' = s + 1` otherwise.
    pub fn prepend_cls_and_modality_token(
        &self,
        tape: &mut Tape,
        seq: NodeId,
        modality: Modality,
    ) -> Result<NodeId> {
        let cls = self.cls_row(tape, modality)?;
        match &self.params.identifier {
            IdentifierParams::Token(tok) => {
                let d = self.width();
                let tok_row = tape.reshape(*tok.get(modality), vec![1, d])?;
                tape.concat_rows(&[cls, tok_row, seq])
            }
            _ => tape.concat_rows(&[cls, seq]),
        }
    }

    /// Full-width CLS row for a modality: content embedding plus positional
    /// offset, with the modality vector appended under the feature-vector
    /// identifier so CLS carries modality identity too.
    fn cls_row(&self, tape: &mut Tape, modality: Modality) -> Result<NodeId> {
        let cls = self.params.cls.for_modality(modality);
        let content = tape.add(cls.embed, cls.pos)?;
        let d_e = self.config.embed_dim;
        let row = tape.reshape(content, vec![1, d_e])?;
        match &self.params.identifier {
            IdentifierParams::FeatureVector(v) => {
                let vec_row = tape.broadcast_row(*v.get(modality), 1)?;
                tape.concat_cols(row, vec_row)
            }
            _ => Ok(row),
        }
    }

    /// Content sequence to encoder input: identifier injection then CLS.
    pub fn build_input(&self, tape: &mut Tape, content: NodeId, modality: Modality) -> Result<NodeId> {
        let seq = match self.config.identifier {
            IdentifierKind::FeatureVector => self.attach_modality_vector(tape, content, modality)?,
            _ => content,
        };
        self.prepend_cls_and_modality_token(tape, seq, modality)
    }

    /// Batched `build_input`: `content` holds `n` stacked sequences of `s`
    /// rows each; every sequence gets its identifier and CLS rows.
    pub fn build_input_batch(
        &self,
        tape: &mut Tape,
        content: NodeId,
        modality: Modality,
        n: usize,
    ) -> Result<NodeId> {
        let rows = tape.value(content).rows();
        debug_assert_eq!(rows % n, 0);
        let s = rows / n;
        let seq = match self.config.identifier {
            IdentifierKind::FeatureVector => self.attach_modality_vector(tape, content, modality)?,
            _ => content,
        };
        let cls = self.cls_row(tape, modality)?;
        let tok_row = match &self.params.identifier {
            IdentifierParams::Token(tok) => {
                Some(tape.reshape(*tok.get(modality), vec![1, self.width()])?)
            }
            _ => None,
        };
        let mut parts = Vec::with_capacity(n * 3);
        for ex in 0..n {
            parts.push(cls);
            if let Some(tok) = tok_row {
                parts.push(tok);
            }
            parts.push(tape.slice_rows(seq, ex * s, s)?);
        }
        tape.concat_rows(&parts)
    }

    /// Run early modality-specific, shared, then late modality-specific
    /// layers over one sequence; shape is preserved.
    pub fn encode(&self, tape: &mut Tape, h0: NodeId, modality: Modality) -> Result<NodeId> {
        self.encode_batch(tape, h0, modality, 1)
    }

    /// Batched encode over `n` stacked sequences.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        h0: NodeId,
        modality: Modality,
        n: usize,
    ) -> Result<NodeId> {
        let d = self.width();
        let t = tape.value(h0);
        if t.rank() != 2 || t.cols() != d || t.rows() % n != 0 {
            return Err(Error::Dimension {
                op: "encode",
                lhs: t.shape().to_vec(),
                rhs: vec![n, d],
            });
        }
        let s = t.rows() / n;
        let mut h = h0;
        for layer in self.params.early.get(modality) {
            h = self.transformer_layer(tape, layer, h, n, s)?;
        }
        for layer in &self.params.shared {
            h = self.transformer_layer(tape, layer, h, n, s)?;
        }
        for layer in self.params.late.get(modality) {
            h = self.transformer_layer(tape, layer, h, n, s)?;
        }
        Ok(h)
    }

    /// One pre-layernorm transformer block over `n` sequences of `s` rows.
    fn transformer_layer(
        &self,
        tape: &mut Tape,
        layer: &LayerParams<NodeId>,
        x: NodeId,
        n: usize,
        s: usize,
    ) -> Result<NodeId> {
        let d = self.width();
        let heads = self.config.heads;
        let dh = d / heads;
        let rows = n * s;

        // Attention sublayer.
        let normed = tape.layernorm(x, layer.ln1_gain, layer.ln1_bias)?;
        let q = self.linear(tape, normed, layer.wq, layer.bq, rows)?;
        let k = self.linear(tape, normed, layer.wk, layer.bk, rows)?;
        let v = self.linear(tape, normed, layer.wv, layer.bv, rows)?;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut example_outputs = Vec::with_capacity(n);
        for ex in 0..n {
            let qx = tape.slice_rows(q, ex * s, s)?;
            let kx = tape.slice_rows(k, ex * s, s)?;
            let vx = tape.slice_rows(v, ex * s, s)?;
            let mut head_out: Option<NodeId> = None;
            for h in 0..heads {
                let qh = tape.slice_cols(qx, h * dh, dh)?;
                let kh = tape.slice_cols(kx, h * dh, dh)?;
                let vh = tape.slice_cols(vx, h * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let logits = tape.matmul(qh, kt)?;
                let scaled = tape.scale(logits, scale);
                let probs = tape.softmax(scaled)?;
                let out = tape.matmul(probs, vh)?;
                head_out = Some(match head_out {
                    None => out,
                    Some(acc) => tape.concat_cols(acc, out)?,
                });
            }
            example_outputs.push(head_out.expect("heads >= 1"));
        }
        let attn = tape.concat_rows(&example_outputs)?;
        let attn = self.linear(tape, attn, layer.wo, layer.bo, rows)?;
        let x = tape.add(x, attn)?;

        // MLP sublayer.
        let normed = tape.layernorm(x, layer.ln2_gain, layer.ln2_bias)?;
        let up = self.linear(tape, normed, layer.w_up, layer.b_up, rows)?;
        let act = tape.gelu(up);
        let down = self.linear(tape, act, layer.w_down, layer.b_down, rows)?;
        tape.add(x, down)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        rows: usize,
    ) -> Result<NodeId> {
        let projected = tape.matmul(x, w)?;
        let bias = tape.broadcast_row(b, rows)?;
        tape.add(projected, bias)
    }

    /// Project the CLS representation (row 0) and l2-normalize: `z` has unit
    /// norm. Returns a rank-1 `d_proj` vector.
    pub fn pool_and_project(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        modality: Modality,
    ) -> Result<NodeId> {
        let s = tape.value(encoded).rows();
        let pooled = self.pool_and_project_batch(tape, encoded, modality, 1, s)?;
        let d_proj = self.config.proj_dim;
        tape.reshape(pooled, vec![d_proj])
    }

    /// Batched pooling: extract each sequence's CLS row, project, normalize.
    /// Output is `n x d_proj` with unit-norm rows.
    pub fn pool_and_project_batch(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        modality: Modality,
        n: usize,
        s: usize,
    ) -> Result<NodeId> {
        let cls_rows = if n == 1 {
            tape.slice_rows(encoded, 0, 1)?
        } else {
            let mut parts = Vec::with_capacity(n);
            for ex in 0..n {
                parts.push(tape.slice_rows(encoded, ex * s, 1)?);
            }
            tape.concat_rows(&parts)?
        };
        let projection = *self.params.projection.for_modality(modality);
        let projected = tape.matmul(cls_rows, projection)?;
        tape.l2_normalize(projected)
    }

    /// Full forward for a batch of images: `n x d_proj` unit-norm embeddings.
    pub fn forward_images(&self, tape: &mut Tape, images: &[Tensor]) -> Result<NodeId> {
        let n = images.len();
        let content = self.embed_image_batch(tape, images)?;
        let h0 = self.build_input_batch(tape, content, Modality::Image, n)?;
        let s = tape.value(h0).rows() / n;
        let encoded = self.encode_batch(tape, h0, Modality::Image, n)?;
        self.pool_and_project_batch(tape, encoded, Modality::Image, n, s)
    }

    /// Full forward for a batch of equal-length captions.
    pub fn forward_texts(&self, tape: &mut Tape, captions: &[&[u32]]) -> Result<NodeId> {
        let n = captions.len();
        let content = self.embed_text_batch(tape, captions)?;
        let h0 = self.build_input_batch(tape, content, Modality::Text, n)?;
        let s = tape.value(h0).rows() / n;
        let encoded = self.encode_batch(tape, h0, Modality::Text, n)?;
        self.pool_and_project_batch(tape, encoded, Modality::Text, n, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(identifier: IdentifierKind, modality_dim: usize) -> ModelConfig {
        ModelConfig {
            identifier,
            embed_dim: 8 - modality_dim,
            modality_dim,
            vocab_size: 12,
            max_seq_len: 6,
            image_size: 16,
            patch_size: 8,
            channels: 3,
            layers_early: 0,
            layers_shared: 1,
            layers_late: 0,
            heads: 2,
            mlp_ratio: 4,
            proj_dim: 8,
            per_modality_head: false,
        }
    }

    #[test]
    fn patch_flattening_orders_top_left_first() {
        // 1-channel 4x4 image, patch 2: four patches in row-major grid order.
        let image = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|v| v as f32).collect(),
        )
        .unwrap();
        let patches = image_to_patches(&image, 2).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        // top-left patch covers pixels (0,0),(0,1),(1,0),(1,1) = 0,1,4,5
        assert_eq!(&patches.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        // next patch to the right: 2,3,6,7
        assert_eq!(&patches.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        // bottom-left patch: 8,9,12,13
        assert_eq!(&patches.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn image_sequence_length_is_patch_count() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let image = Tensor::zeros(vec![3, 16, 16]);
        let seq = bound.embed_image(&mut tape, &image).unwrap();
        assert_eq!(tape.value(seq).shape(), &[4, 8]); // (16/8)^2 = 4 patches
    }

    #[test]
    fn empty_text_is_an_input_error() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        assert!(matches!(
            bound.embed_text(&mut tape, &[]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn out_of_vocab_token_is_an_input_error() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        assert!(matches!(
            bound.embed_text(&mut tape, &[0, 12]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn wrong_image_shape_is_an_input_error() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let image = Tensor::zeros(vec![3, 8, 8]);
        assert!(matches!(
            bound.embed_image(&mut tape, &image),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn modality_vector_fills_last_columns() {
        // s = 3, d_e = 2, d_m = 1: every output row ends in the stored v.
        let mut config = tiny_config(IdentifierKind::FeatureVector, 1);
        config.embed_dim = 2;
        config.heads = 1;
        config.proj_dim = 3;
        let mut model = EncoderModel::init(config, 0).unwrap();
        if let IdentifierParams::FeatureVector(v) = &mut model.params.identifier {
            *v.get_mut(Modality::Text) = Tensor::new(vec![1], vec![7.0]).unwrap();
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(3, 2, vec![0.1; 6]).unwrap());
        let out = bound
            .attach_modality_vector(&mut tape, content, Modality::Text)
            .unwrap();
        let t = tape.value(out);
        assert_eq!(t.shape(), &[3, 3]);
        for r in 0..3 {
            assert_eq!(t.at(r, 2), 7.0);
        }
    }

    #[test]
    fn identical_content_differs_only_in_modality_columns() {
        let config = tiny_config(IdentifierKind::FeatureVector, 2);
        let model = EncoderModel::init(config, 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(3, 6, vec![0.25; 18]).unwrap());
        let img = bound
            .attach_modality_vector(&mut tape, content, Modality::Image)
            .unwrap();
        let txt = bound
            .attach_modality_vector(&mut tape, content, Modality::Text)
            .unwrap();
        let (ti, tt) = (tape.value(img).clone(), tape.value(txt).clone());
        for r in 0..3 {
            for c in 0..6 {
                assert_eq!(ti.at(r, c), tt.at(r, c));
            }
            assert_ne!(
                (ti.at(r, 6), ti.at(r, 7)),
                (tt.at(r, 6), tt.at(r, 7)),
                "modality columns must differ"
            );
        }
    }

    #[test]
    fn attach_without_feature_vector_identifier_is_config_error() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(2, 8, vec![0.0; 16]).unwrap());
        assert!(matches!(
            bound.attach_modality_vector(&mut tape, content, Modality::Image),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn token_identifier_lengthens_sequence_by_one_extra_row() {
        for (kind, expect_rows) in [
            (IdentifierKind::Token, 6),
            (IdentifierKind::None, 5),
        ] {
            let model = EncoderModel::init(tiny_config(kind, 0), 0).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let content = tape.input(Tensor::matrix(4, 8, vec![0.5; 32]).unwrap());
            let h0 = bound
                .prepend_cls_and_modality_token(&mut tape, content, Modality::Image)
                .unwrap();
            assert_eq!(tape.value(h0).rows(), expect_rows);
        }
    }

    #[test]
    fn token_row_equals_stored_modality_token() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::Token, 0), 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(4, 8, vec![0.5; 32]).unwrap());
        let h0 = bound
            .prepend_cls_and_modality_token(&mut tape, content, Modality::Text)
            .unwrap();
        let IdentifierParams::Token(tok) = &model.params.identifier else {
            panic!("token identifier expected");
        };
        let row1: Vec<f32> = (0..8).map(|c| tape.value(h0).at(1, c)).collect();
        assert_eq!(row1, tok.text.data());
    }

    #[test]
    fn zero_layers_encode_is_identity() {
        let mut config = tiny_config(IdentifierKind::None, 0);
        config.layers_shared = 0;
        let model = EncoderModel::init(config, 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h0 = tape.input(Tensor::matrix(3, 8, (0..24).map(|v| v as f32 * 0.1).collect()).unwrap());
        let out = bound.encode(&mut tape, h0, Modality::Image).unwrap();
        assert_eq!(out, h0);
    }

    #[test]
    fn encode_preserves_sequence_shape() {
        let mut config = tiny_config(IdentifierKind::None, 0);
        config.layers_early = 1;
        config.layers_shared = 2;
        config.layers_late = 1;
        let model = EncoderModel::init(config, 5).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let h0 = tape.input(Tensor::matrix(5, 8, vec![0.1; 40]).unwrap());
        let out = bound.encode(&mut tape, h0, Modality::Text).unwrap();
        assert_eq!(tape.value(out).shape(), &[5, 8]);
        assert!(tape.value(out).all_finite());
    }

    #[test]
    fn pool_normalizes_cls_projection() {
        let mut config = tiny_config(IdentifierKind::None, 0);
        config.embed_dim = 2;
        config.heads = 1;
        config.proj_dim = 2;
        let mut model = EncoderModel::init(config, 0).unwrap();
        model.params.projection = Shareable::Shared(Tensor::eye(2));
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let encoded = tape.input(Tensor::matrix(2, 2, vec![3.0, 4.0, 9.0, 9.0]).unwrap());
        let z = bound
            .pool_and_project(&mut tape, encoded, Modality::Image)
            .unwrap();
        assert_eq!(tape.value(z).shape(), &[2]);
        assert_eq!(tape.value(z).data(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_cls_row_is_a_domain_error() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let encoded = tape.input(Tensor::matrix(2, 8, vec![0.0; 16]).unwrap());
        assert!(matches!(
            bound.pool_and_project(&mut tape, encoded, Modality::Image),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn pooled_embeddings_have_unit_norm() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 9).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let images: Vec<Tensor> = (0..3)
            .map(|i| Tensor::full(vec![3, 16, 16], 0.1 + i as f32 * 0.3))
            .collect();
        let z = bound.forward_images(&mut tape, &images).unwrap();
        let t = tape.value(z);
        assert_eq!(t.shape(), &[3, 8]);
        for r in 0..3 {
            let norm: f32 = (0..8).map(|c| t.at(r, c) * t.at(r, c)).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_layer_nodes_are_identical_across_modalities() {
        // Identity check for the sharing invariant: both forward paths
        // consume the same parameter node ids for the shared stack.
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 2).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let image = Tensor::full(vec![3, 16, 16], 0.2);
        let caption = [1u32, 2, 3];
        bound.forward_images(&mut tape, &[image]).unwrap();
        bound.forward_texts(&mut tape, &[&caption]).unwrap();
        // One parameter set: the bound ids are the same objects.
        assert_eq!(bound.params.shared.len(), 1);
        let wq = bound.params.shared[0].wq;
        let _ = wq; // both paths above used the same node; nothing was rebound
        assert_eq!(tape.grad(wq), None); // untouched until backward
    }

    #[test]
    fn identifier_none_gives_equal_inputs_for_equal_content() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::None, 0), 4).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(3, 8, vec![0.7; 24]).unwrap());
        let hi = bound.build_input(&mut tape, content, Modality::Image).unwrap();
        let ht = bound.build_input(&mut tape, content, Modality::Text).unwrap();
        assert_eq!(tape.value(hi).data(), tape.value(ht).data());
    }

    #[test]
    fn identifier_token_gives_different_inputs_for_equal_content() {
        let model = EncoderModel::init(tiny_config(IdentifierKind::Token, 0), 4).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let content = tape.input(Tensor::matrix(3, 8, vec![0.7; 24]).unwrap());
        let hi = bound.build_input(&mut tape, content, Modality::Image).unwrap();
        let ht = bound.build_input(&mut tape, content, Modality::Text).unwrap();
        assert_ne!(tape.value(hi).data(), tape.value(ht).data());
    }
}
