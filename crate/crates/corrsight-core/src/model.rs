//! The attention ConvLSTM autoencoder.
//!
//! Topology, mirrored around a bottleneck:
//!
//! ```text
//! input  [h,1,S,S]
//!   encoder: (ConvLSTM -> MaxPool 2x2) per stage, filters e.g. [64,64,32]
//!   decoder: (UpSample 2x2 -> ConvLSTM) per stage, filters e.g. [32,64,64]
//!   head:    1x1 conv back to one channel
//! output [h,1,S,S]
//! ```
//!
//! Every ConvLSTM runs time-distributed: it keeps its recurrent state
//! across the h steps while pools and upsamples apply per step. Upsample
//! targets retrace the encoder's pre-pool sizes, so ceil-mode pooling of
//! odd sizes (45 -> 23 -> 12 -> 6) is undone exactly (6 -> 12 -> 23 -> 45).
//!
//! Attention bridges the bottleneck: the per-step hidden maps of the last
//! encoder ConvLSTM (before its pool) are the annotations; each decoder
//! step scores them against the previous first-decoder-ConvLSTM hidden
//! state and gets the blended context map concatenated onto its input. The
//! first query, before the decoder has any state, is the encoder's final
//! hidden map.

use crate::error::{Error, Result};
use crate::feature_image::{correlation_matrix, FeatureImage};
use crate::layers::{AttentionBlock, CellUpdate, ConvLstmCell, ConvLstmState};
use crate::preprocess::{EmbeddingTable, TimeSeriesSet, Window};
use crate::rng::SeededRng;
use crate::tensor::{Activation, Padding, Tensor};

/// Which architecture flavor to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    /// Three-stage autoencoder with attention.
    Full,
    /// Same stack, attention removed.
    NoAttention,
    /// Drops the last encoder stage and the first decoder stage, keeps
    /// attention.
    Shallow,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoAttention => "no-attention",
            ModelVariant::Shallow => "shallow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ModelVariant::Full),
            "no-attention" => Ok(ModelVariant::NoAttention),
            "shallow" => Ok(ModelVariant::Shallow),
            other => Err(Error::invalid(
                "model_variant",
                format!("unknown variant {other:?} (full, no-attention, shallow)"),
            )),
        }
    }
}

/// Everything needed to build the network, minus the weights.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    /// Feature-image side length (n + p).
    pub input_side: usize,
    /// Images per model sample.
    pub h: usize,
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub kernel: usize,
    /// Candidate/output transform inside the cells; gates stay sigmoid.
    pub activation: Activation,
    pub update: CellUpdate,
    pub variant: ModelVariant,
    pub align_dim: usize,
    /// Reconstruct all h images (true) or only the last one.
    pub decode_full_sequence: bool,
}

impl ModelSpec {
    pub fn new(input_side: usize, h: usize) -> Self {
        ModelSpec {
            input_side,
            h,
            encoder_filters: vec![64, 64, 32],
            decoder_filters: vec![32, 64, 64],
            kernel: 3,
            activation: Activation::Tanh,
            update: CellUpdate::Coupled,
            variant: ModelVariant::Full,
            align_dim: 32,
            decode_full_sequence: true,
        }
    }

    /// Filter lists after applying the variant (shallow trims one stage at
    /// each end of the bottleneck).
    pub fn effective_filters(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        let (enc, dec) = match self.variant {
            ModelVariant::Full | ModelVariant::NoAttention => {
                (self.encoder_filters.clone(), self.decoder_filters.clone())
            }
            ModelVariant::Shallow => {
                if self.encoder_filters.len() < 2 {
                    return Err(Error::invalid(
                        "model_spec",
                        "shallow variant needs at least two encoder stages",
                    ));
                }
                (
                    self.encoder_filters[..self.encoder_filters.len() - 1].to_vec(),
                    self.decoder_filters[1..].to_vec(),
                )
            }
        };
        Ok((enc, dec))
    }

    /// Spatial sizes at each encoder depth, `sizes[0]` the input side and
    /// `sizes.last()` the bottleneck.
    pub fn stage_sizes(&self) -> Result<Vec<usize>> {
        let (enc, _) = self.effective_filters()?;
        let mut sizes = vec![self.input_side];
        for _ in 0..enc.len() {
            sizes.push(sizes.last().unwrap().div_ceil(2));
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 {
            return Err(Error::invalid("model_spec", "h must be at least 1"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid("model_spec", "kernel must be odd"));
        }
        if self.encoder_filters.is_empty()
            || self.encoder_filters.len() != self.decoder_filters.len()
        {
            return Err(Error::invalid(
                "model_spec",
                "encoder and decoder need the same nonzero stage count",
            ));
        }
        let (enc, dec) = self.effective_filters()?;
        if enc.last() != dec.first() {
            return Err(Error::invalid(
                "model_spec",
                format!(
                    "bottleneck filters must mirror: encoder ends at {}, decoder starts at {}",
                    enc.last().unwrap(),
                    dec.first().unwrap()
                ),
            ));
        }
        let min_side = 1usize << enc.len();
        if self.input_side < min_side {
            return Err(Error::invalid(
                "model_spec",
                format!(
                    "input side {} too small to survive {} pools (needs >= {min_side})",
                    self.input_side,
                    enc.len()
                ),
            ));
        }
        if self.variant != ModelVariant::NoAttention && self.align_dim == 0 {
            return Err(Error::invalid("model_spec", "align_dim must be at least 1"));
        }
        Ok(())
    }
}

/// What one forward pass returns.
pub struct ModelOutput {
    /// `[h,1,S,S]`, or `[1,1,S,S]` when decoding only the last step.
    pub reconstruction: Tensor,
    /// Softmax weights per decoder step; empty without attention.
    pub attention_weights: Vec<Vec<f64>>,
}

/// A built model: spec plus weights (cells, attention, head, embedding
/// tables).
pub struct ModelState {
    pub spec: ModelSpec,
    encoder: Vec<ConvLstmCell>,
    decoder: Vec<ConvLstmCell>,
    attention: Option<AttentionBlock>,
    head_w: Tensor,
    head_b: Tensor,
    pub embeddings: Vec<EmbeddingTable>,
}

impl ModelState {
    /// Builds and initializes the network. `context_dims` lists the
    /// categorical variables as (name, q, p) and becomes the jointly
    /// trained embedding tables.
    pub fn new(
        spec: ModelSpec,
        context_dims: &[(String, usize, usize)],
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        let (enc_filters, dec_filters) = spec.effective_filters()?;
        let sizes = spec.stage_sizes()?;
        let stages = enc_filters.len();

        let mut encoder = Vec::with_capacity(stages);
        let mut in_ch = 1usize;
        for (i, &f) in enc_filters.iter().enumerate() {
            encoder.push(ConvLstmCell::new(
                in_ch,
                f,
                (sizes[i], sizes[i]),
                spec.kernel,
                spec.activation,
                spec.update,
                rng,
            )?);
            in_ch = f;
        }

        let bridge_side = sizes[stages - 1];
        let bridge_filters = *enc_filters.last().unwrap();
        let annotation_dim = bridge_filters * bridge_side * bridge_side;

        let attention = match spec.variant {
            ModelVariant::NoAttention => None,
            _ => Some(AttentionBlock::new(
                dec_filters[0] * bridge_side * bridge_side,
                annotation_dim,
                spec.align_dim,
                rng,
            )?),
        };

        let mut decoder = Vec::with_capacity(stages);
        let mut in_ch = bridge_filters;
        for (j, &f) in dec_filters.iter().enumerate() {
            let mut cell_in = in_ch;
            if j == 0 && attention.is_some() {
                cell_in += bridge_filters;
            }
            let side = sizes[stages - 1 - j];
            decoder.push(ConvLstmCell::new(
                cell_in,
                f,
                (side, side),
                spec.kernel,
                spec.activation,
                spec.update,
                rng,
            )?);
            in_ch = f;
        }

        let last = *dec_filters.last().unwrap();
        let head_w = crate::layers::xavier_uniform(&[1, last, 1, 1], last, 1, rng)?;
        let head_b = Tensor::param(&[1], vec![0.0])?;

        let mut embeddings = Vec::with_capacity(context_dims.len());
        for (name, q, p) in context_dims {
            embeddings.push(EmbeddingTable::new(name, *q, *p, rng)?);
        }

        Ok(ModelState {
            spec,
            encoder,
            decoder,
            attention,
            head_w,
            head_b,
            embeddings,
        })
    }

    /// Every learnable tensor with a stable name, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for t in &self.embeddings {
            out.push((format!("embed.{}", t.name), t.weights.clone()));
        }
        for (i, cell) in self.encoder.iter().enumerate() {
            out.extend(cell.named_params(&format!("enc{i}")));
        }
        for (j, cell) in self.decoder.iter().enumerate() {
            out.extend(cell.named_params(&format!("dec{j}")));
        }
        if let Some(att) = &self.attention {
            out.extend(att.named_params("attn"));
        }
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    /// Reconstructs a sample of shape `[h,1,S,S]`.
    pub fn forward(&self, sample: &Tensor) -> Result<ModelOutput> {
        let spec = &self.spec;
        let side = spec.input_side;
        let shape = sample.shape();
        if shape != [spec.h, 1, side, side] {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: shape,
                rhs: vec![spec.h, 1, side, side],
            });
        }
        let sizes = spec.stage_sizes()?;
        let stages = self.encoder.len();

        // split the sample into per-step [1,S,S] maps
        let flat = sample.reshape(&[spec.h, side * side])?;
        let mut seq: Vec<Tensor> = (0..spec.h)
            .map(|t| flat.select_row(t)?.reshape(&[1, side, side]))
            .collect::<Result<_>>()?;

        // encode, keeping the last stage's pre-pool hidden maps
        let mut annotations: Vec<Tensor> = Vec::new();
        for (i, cell) in self.encoder.iter().enumerate() {
            let mut state = cell.zero_state()?;
            let mut hidden = Vec::with_capacity(spec.h);
            for x in &seq {
                let step = cell.step(x, &state)?;
                state = ConvLstmState {
                    h: step.h.clone(),
                    c: step.c,
                };
                hidden.push(step.h);
            }
            if i == stages - 1 {
                annotations = hidden.clone();
            }
            seq = hidden
                .into_iter()
                .map(|h| h.maxpool2x2())
                .collect::<Result<_>>()?;
        }

        // first decoder stage, with attention on its input
        let mut att_weights = Vec::new();
        {
            let cell = &self.decoder[0];
            let target = sizes[stages - 1];
            let mut state = cell.zero_state()?;
            let mut query = annotations
                .last()
                .expect("encoder produced annotations")
                .flatten_col()?;
            let mut outputs = Vec::with_capacity(spec.h);
            for x in &seq {
                let mut input = x.upsample2x2(Some((target, target)))?;
                if let Some(att) = &self.attention {
                    let out = att.context(&query, &annotations)?;
                    att_weights.push(out.weights.to_vec());
                    input = Tensor::concat(&[&input, &out.context], 0)?;
                }
                let step = cell.step(&input, &state)?;
                query = step.h.flatten_col()?;
                state = ConvLstmState {
                    h: step.h.clone(),
                    c: step.c,
                };
                outputs.push(step.h);
            }
            seq = outputs;
        }

        // remaining decoder stages
        for (j, cell) in self.decoder.iter().enumerate().skip(1) {
            let target = sizes[stages - 1 - j];
            let mut state = cell.zero_state()?;
            let mut outputs = Vec::with_capacity(spec.h);
            for x in &seq {
                let input = x.upsample2x2(Some((target, target)))?;
                let step = cell.step(&input, &state)?;
                state = ConvLstmState {
                    h: step.h.clone(),
                    c: step.c,
                };
                outputs.push(step.h);
            }
            seq = outputs;
        }

        // 1x1 head back to a single channel, per step
        let heads: Vec<Tensor> = seq
            .iter()
            .map(|x| x.conv2d(&self.head_w, Some(&self.head_b), 1, Padding::Same))
            .collect::<Result<_>>()?;

        let reconstruction = if spec.decode_full_sequence {
            let refs: Vec<&Tensor> = heads.iter().collect();
            Tensor::concat(&refs, 0)?.reshape(&[spec.h, 1, side, side])?
        } else {
            heads
                .last()
                .expect("h >= 1")
                .reshape(&[1, 1, side, side])?
        };
        Ok(ModelOutput {
            reconstruction,
            attention_weights: att_weights,
        })
    }
}

// ---------------------------------------------------------------------
// Sample assembly
// ---------------------------------------------------------------------

/// Expected image side for a sensor set and its embedding tables.
pub fn image_side(sensors: &TimeSeriesSet, tables: &[EmbeddingTable]) -> usize {
    sensors.n_series() + tables.iter().map(|t| t.dim).sum::<usize>()
}

/// Builds one `[h,1,S,S]` model sample from `h` consecutive windows,
/// with every entry that involves an embedding pseudo-series expressed as
/// differentiable ops on the tables' weights. Sensor-only entries enter as
/// constants. With no tables the result is simply the stacked feature
/// images.
///
/// The sensor/embedding cross block for table `W` is `A . W`, where
/// `A[i][u]` averages sensor `i` over the window's timestamps that carry
/// category `u`; the embedding/embedding block for tables `W1, W2` is
/// `W1^T . C . W2` with `C` the scaled category co-occurrence count. Both
/// reduce the per-timestep sum to constant coefficient matrices, so a
/// context value may change mid-window and the math still holds.
pub fn assemble_sample(
    sensors: &TimeSeriesSet,
    tables: &[EmbeddingTable],
    windows: &[Window],
    d: usize,
) -> Result<Tensor> {
    if windows.is_empty() {
        return Err(Error::invalid("assemble_sample", "no windows"));
    }
    if tables.len() != sensors.context.len() {
        return Err(Error::invalid(
            "assemble_sample",
            format!(
                "{} tables for {} context columns",
                tables.len(),
                sensors.context.len()
            ),
        ));
    }
    let side = image_side(sensors, tables);
    let h = windows.len();

    let mut steps = Vec::with_capacity(h);
    for w in windows {
        if w.start + d > sensors.len() {
            return Err(Error::invalid(
                "assemble_sample",
                format!("window [{}, {}) out of range", w.start, w.start + d),
            ));
        }
        let image = assemble_image(sensors, tables, w.start, d)?;
        steps.push(image.reshape(&[1, side, side])?);
    }
    let refs: Vec<&Tensor> = steps.iter().collect();
    Tensor::concat(&refs, 0)?.reshape(&[h, 1, side, side])
}

fn assemble_image(
    sensors: &TimeSeriesSet,
    tables: &[EmbeddingTable],
    start: usize,
    d: usize,
) -> Result<Tensor> {
    let n = sensors.n_series();
    let sensor_block =
        Tensor::constant(&[n, n], correlation_matrix(&sensors.values, start, d))?;
    if tables.is_empty() {
        return Ok(sensor_block);
    }

    // sensor x embedding coefficient matrices, one per table
    let mut coeff = Vec::with_capacity(tables.len());
    for (col, table) in sensors.context.iter().zip(tables) {
        let q = table.num_categories;
        let mut a = vec![0.0; n * q];
        for delta in 0..d {
            let u = col.values[start + delta];
            for i in 0..n {
                a[i * q + u] += sensors.values[i][start + delta];
            }
        }
        for v in a.iter_mut() {
            *v /= d as f64;
        }
        coeff.push(Tensor::constant(&[n, q], a)?);
    }

    // category co-occurrence, scaled by 1/d, for every table pair
    let cooc = |c1: usize, c2: usize| -> Result<Tensor> {
        let (q1, q2) = (tables[c1].num_categories, tables[c2].num_categories);
        let mut c = vec![0.0; q1 * q2];
        for delta in 0..d {
            let u1 = sensors.context[c1].values[start + delta];
            let u2 = sensors.context[c2].values[start + delta];
            c[u1 * q2 + u2] += 1.0;
        }
        for v in c.iter_mut() {
            *v /= d as f64;
        }
        Tensor::constant(&[q1, q2], c)
    };

    let sensor_embed: Vec<Tensor> = coeff
        .iter()
        .zip(tables)
        .map(|(a, t)| a.matmul(&t.weights))
        .collect::<Result<_>>()?;

    // block grid: index 0 = sensors, 1.. = tables
    let mut rows = Vec::with_capacity(1 + tables.len());
    {
        let mut blocks = vec![sensor_block.clone()];
        blocks.extend(sensor_embed.iter().cloned());
        let refs: Vec<&Tensor> = blocks.iter().collect();
        rows.push(Tensor::concat(&refs, 1)?);
    }
    for r in 0..tables.len() {
        let mut blocks = vec![sensor_embed[r].transpose()?];
        for c in 0..tables.len() {
            let block = tables[r]
                .weights
                .transpose()?
                .matmul(&cooc(r, c)?)?
                .matmul(&tables[c].weights)?;
            blocks.push(block);
        }
        let refs: Vec<&Tensor> = blocks.iter().collect();
        rows.push(Tensor::concat(&refs, 1)?);
    }
    let refs: Vec<&Tensor> = rows.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Stacks already-built feature images into a `[h,1,S,S]` constant sample.
pub fn sample_from_images(images: &[FeatureImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::invalid("sample_from_images", "no images"));
    }
    let side = images[0].side;
    let h = images.len();
    let mut data = Vec::with_capacity(h * side * side);
    for im in images {
        if im.side != side {
            return Err(Error::invalid(
                "sample_from_images",
                format!("mixed image sizes {side} and {}", im.side),
            ));
        }
        data.extend_from_slice(&im.matrix);
    }
    Tensor::constant(&[h, 1, side, side], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_image::{build_feature_image, build_feature_images};
    use crate::preprocess::{make_windows, ContextColumn, Label};
    use crate::testkit;
    use std::collections::BTreeMap;

    fn tiny_spec(side: usize, h: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(side, h);
        spec.encoder_filters = vec![2, 2, 1];
        spec.decoder_filters = vec![1, 2, 2];
        spec.align_dim = 4;
        spec
    }

    fn const_sample(h: usize, side: usize, v: f64) -> Tensor {
        Tensor::constant(&[h, 1, side, side], vec![v; h * side * side]).unwrap()
    }

    #[test]
    fn shape_trace_even_and_odd_sides() {
        let mut rng = crate::rng::seeded(71);
        for side in [48usize, 45, 8, 64] {
            let spec = tiny_spec(side, 2);
            let model = ModelState::new(spec, &[], &mut rng).unwrap();
            let out = model.forward(&const_sample(2, side, 0.3)).unwrap();
            assert_eq!(out.reconstruction.shape(), vec![2, 1, side, side], "side {side}");
            assert_eq!(out.attention_weights.len(), 2);
        }
    }

    #[test]
    fn stage_sizes_mirror_for_odd_input() {
        let spec = tiny_spec(45, 2);
        assert_eq!(spec.stage_sizes().unwrap(), vec![45, 23, 12, 6]);
    }

    #[test]
    fn untrained_output_is_finite_and_tame() {
        let mut rng = crate::rng::seeded(72);
        let model = ModelState::new(tiny_spec(10, 3), &[], &mut rng).unwrap();
        let out = model.forward(&const_sample(3, 10, 0.7)).unwrap();
        for v in out.reconstruction.to_vec() {
            assert!(v.is_finite());
            assert!(v.abs() < 10.0);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_each_step() {
        let mut rng = crate::rng::seeded(73);
        let model = ModelState::new(tiny_spec(12, 4), &[], &mut rng).unwrap();
        let out = model.forward(&const_sample(4, 12, 0.5)).unwrap();
        assert_eq!(out.attention_weights.len(), 4);
        for w in &out.attention_weights {
            assert_eq!(w.len(), 4);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_attention_variant_reports_no_weights() {
        let mut rng = crate::rng::seeded(74);
        let mut spec = tiny_spec(10, 2);
        spec.variant = ModelVariant::NoAttention;
        let model = ModelState::new(spec, &[], &mut rng).unwrap();
        let out = model.forward(&const_sample(2, 10, 0.2)).unwrap();
        assert_eq!(out.reconstruction.shape(), vec![2, 1, 10, 10]);
        assert!(out.attention_weights.is_empty());
    }

    #[test]
    fn shallow_variant_drops_a_stage_and_still_mirrors() {
        let mut rng = crate::rng::seeded(75);
        let mut spec = tiny_spec(45, 2);
        spec.variant = ModelVariant::Shallow;
        // shallow trims to encoder [2,2] / decoder [2,2]
        let (enc, dec) = spec.effective_filters().unwrap();
        assert_eq!(enc, vec![2, 2]);
        assert_eq!(dec, vec![2, 2]);
        assert_eq!(spec.stage_sizes().unwrap(), vec![45, 23, 12]);
        let model = ModelState::new(spec, &[], &mut rng).unwrap();
        let out = model.forward(&const_sample(2, 45, 0.4)).unwrap();
        assert_eq!(out.reconstruction.shape(), vec![2, 1, 45, 45]);
        assert_eq!(out.attention_weights.len(), 2);
    }

    #[test]
    fn last_only_decoding_shrinks_output() {
        let mut rng = crate::rng::seeded(76);
        let mut spec = tiny_spec(10, 3);
        spec.decode_full_sequence = false;
        let model = ModelState::new(spec, &[], &mut rng).unwrap();
        let out = model.forward(&const_sample(3, 10, 0.1)).unwrap();
        assert_eq!(out.reconstruction.shape(), vec![1, 1, 10, 10]);
    }

    #[test]
    fn undersized_input_is_rejected() {
        let mut rng = crate::rng::seeded(77);
        let spec = tiny_spec(7, 2); // three pools need at least 8
        assert!(ModelState::new(spec, &[], &mut rng).is_err());
        let mut mismatched = tiny_spec(16, 2);
        mismatched.decoder_filters = vec![2, 2, 2]; // bottleneck 1 vs 2
        assert!(ModelState::new(mismatched, &[], &mut rng).is_err());
    }

    #[test]
    fn default_spec_matches_published_filter_counts() {
        let spec = ModelSpec::new(45, 5);
        assert_eq!(spec.encoder_filters, vec![64, 64, 32]);
        assert_eq!(spec.decoder_filters, vec![32, 64, 64]);
        assert_eq!(spec.kernel, 3);
        spec.validate().unwrap();
    }

    #[test]
    fn miniature_full_model_gradient_check() {
        let mut rng = crate::rng::seeded(78);
        let spec = tiny_spec(8, 2);
        let model = ModelState::new(spec, &[], &mut rng).unwrap();
        let mut sample_data = Vec::new();
        for _ in 0..2 * 8 * 8 {
            sample_data.push(crate::rng::uniform(&mut rng, 0.0, 1.0));
        }
        let sample = Tensor::constant(&[2, 1, 8, 8], sample_data).unwrap();
        let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let err = testkit::max_grad_error(&params, |_| {
            let out = model.forward(&sample).unwrap();
            let diff = out.reconstruction.sub(&sample).unwrap();
            diff.mul(&diff).unwrap().mean().unwrap()
        });
        assert!(err < 1e-3, "model gradient error {err:.3e}");
    }

    fn context_set() -> TimeSeriesSet {
        // two sensors, one context column that changes mid-experiment
        let t = 12;
        TimeSeriesSet::new(
            vec!["a".into(), "b".into()],
            vec![
                (0..t).map(|v| (v as f64 * 0.7).sin() * 0.5 + 0.5).collect(),
                (0..t).map(|v| (v as f64 * 0.3).cos() * 0.5 + 0.5).collect(),
            ],
            vec![ContextColumn {
                name: "recipe".into(),
                num_categories: 3,
                values: vec![0, 0, 1, 1, 0, 2, 2, 2, 1, 0, 0, 1],
            }],
            vec![0; t],
            BTreeMap::from([(0, Label::Normal)]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn assembled_sample_matches_enriched_image_route() {
        let mut rng = crate::rng::seeded(79);
        let sensors = context_set();
        let table = EmbeddingTable::new("recipe", 3, 2, &mut rng).unwrap();
        let idx = make_windows(&sensors, 4, 2).unwrap();
        let windows = &idx.windows[..3];

        let sample = assemble_sample(&sensors, std::slice::from_ref(&table), windows, 4).unwrap();
        assert_eq!(sample.shape(), vec![3, 1, 4, 4]);

        let enriched = crate::preprocess::enrich(&sensors, std::slice::from_ref(&table)).unwrap();
        for (k, w) in windows.iter().enumerate() {
            let image = build_feature_image(&enriched, w, 4).unwrap();
            let got = sample.to_vec()[k * 16..(k + 1) * 16].to_vec();
            testkit::assert_close(&got, &image.matrix, 1e-12, "assembled vs enriched");
        }
    }

    #[test]
    fn assembled_sample_routes_gradients_into_tables() {
        let mut rng = crate::rng::seeded(80);
        let sensors = context_set();
        let table = EmbeddingTable::new("recipe", 3, 2, &mut rng).unwrap();
        let idx = make_windows(&sensors, 4, 4).unwrap();
        let sample =
            assemble_sample(&sensors, std::slice::from_ref(&table), &idx.windows[..2], 4).unwrap();
        assert!(sample.requires_grad());
        sample.mul(&sample).unwrap().sum().unwrap().backward().unwrap();
        let g = table.weights.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sample_without_context_is_constant_images() {
        let sensors = {
            let mut s = context_set();
            s.context.clear();
            s
        };
        let idx = make_windows(&sensors, 4, 4).unwrap();
        let sample = assemble_sample(&sensors, &[], &idx.windows, 4).unwrap();
        assert!(!sample.requires_grad());

        let images = build_feature_images(&sensors, &idx).unwrap();
        let stacked = sample_from_images(&images).unwrap();
        testkit::assert_close(&sample.to_vec(), &stacked.to_vec(), 1e-15, "image stack");
    }

    #[test]
    fn model_trains_embeddings_end_to_end() {
        let mut rng = crate::rng::seeded(81);
        let sensors = context_set();
        let table = EmbeddingTable::new("recipe", 3, 2, &mut rng).unwrap();
        let side = image_side(&sensors, std::slice::from_ref(&table));
        assert_eq!(side, 4);

        let mut spec = tiny_spec(side, 2);
        spec.encoder_filters = vec![2, 1];
        spec.decoder_filters = vec![1, 2];
        let model = ModelState::new(spec, &[("recipe".into(), 3, 2)], &mut rng).unwrap();

        let idx = make_windows(&sensors, 4, 2).unwrap();
        let sample = assemble_sample(&sensors, &model.embeddings, &idx.windows[..2], 4).unwrap();
        let target = sample.detach();
        let out = model.forward(&sample).unwrap();
        let diff = out.reconstruction.sub(&target).unwrap();
        diff.mul(&diff).unwrap().mean().unwrap().backward().unwrap();
        let g = model.embeddings[0].weights.grad().unwrap();
        assert!(
            g.iter().any(|&v| v != 0.0),
            "embedding table untouched by the model loss"
        );
    }
}
