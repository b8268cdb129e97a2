//! The assembled span extractor: type-conditioned toy encoder, the optional
//! span-bounded attention layer, boundary heads, span decoding, and
//! checkpoint IO.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::attention::{FsaCache, FsaHeadState, FsaLayer, WindowMode};
use crate::encoder::{BlockCache, EncoderBlock};
use crate::error::{Error, Result};
use crate::loss::BoundaryLogits;
use crate::nn::{self, Embedding, Linear, ParamView, Visit};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub type_count: usize,
    pub fsa_enabled: bool,
    pub fsl_enabled: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("model_width", self.model_width),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
            ("type_count", self.type_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.model_width % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_width {} not divisible by num_heads {}",
                self.model_width, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_width / self.num_heads
    }
}

/// One decoded span with its confidence (geometric mean of the boundary
/// probabilities).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction<S> {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub type_id: usize,
    pub score: S,
}

#[derive(Debug, Clone)]
pub struct SpanModel<S> {
    pub config: ModelConfig,
    pub fsa_template: FsaHeadState<S>,
    pub window: WindowMode,
    pub span_lr_scale: S,
    token_embed: Embedding<S>,
    type_embed: Embedding<S>,
    pos_embed: Embedding<S>,
    blocks: Vec<EncoderBlock<S>>,
    pub fsa: Option<FsaLayer<S>>,
    start_head: Linear<S>,
    end_head: Linear<S>,
}

/// Intermediates of one forward pass, consumed by [`SpanModel::backward`].
pub struct ModelCache<S> {
    ids: Vec<usize>,
    type_id: usize,
    positions: Vec<usize>,
    x0: Array2<S>,
    block_inputs: Vec<Array2<S>>,
    block_caches: Vec<BlockCache<S>>,
    encoded: Array2<S>,
    fsa_cache: Option<FsaCache<S>>,
    head_in: Array2<S>,
}

impl<S: Scalar> ModelCache<S> {
    /// Attention weight matrices of the span layer, one per head.
    pub fn fsa_weights(&self) -> Option<&[Array2<S>]> {
        self.fsa_cache.as_ref().map(|c| c.weights())
    }
}

impl<S: Scalar> SpanModel<S> {
    pub fn new(
        config: ModelConfig,
        fsa_template: FsaHeadState<S>,
        window: WindowMode,
        span_lr_scale: S,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = config.model_width;
        let token_embed = Embedding::init(&mut rng, config.vocab_size, width);
        let type_embed = Embedding::init(&mut rng, config.type_count, width);
        let pos_embed = Embedding::init(&mut rng, config.max_seq_len + 1, width);
        let blocks = (0..config.num_layers)
            .map(|_| EncoderBlock::init(&mut rng, config.num_heads, config.head_dim()))
            .collect::<Result<Vec<_>>>()?;
        let fsa = if config.fsa_enabled {
            Some(FsaLayer::init(
                &mut rng,
                config.num_heads,
                config.head_dim(),
                &fsa_template,
                window,
                config.max_seq_len + 1,
                span_lr_scale,
            )?)
        } else {
            None
        };
        let start_head = Linear::init(&mut rng, 1, width);
        let end_head = Linear::init(&mut rng, 1, width);
        Ok(Self {
            config,
            fsa_template,
            window,
            span_lr_scale,
            token_embed,
            type_embed,
            pos_embed,
            blocks,
            fsa,
            start_head,
            end_head,
        })
    }

    /// Embeds the type marker plus tokens and runs the encoder stack.
    /// Output has `tokens.len() + 1` rows; row 0 is the marker.
    pub fn encode(&self, tokens: &[usize], type_id: usize) -> Result<Array2<S>> {
        Ok(self.encode_cached(tokens, type_id)?.0)
    }

    fn embed(&self, tokens: &[usize], type_id: usize) -> Result<Array2<S>> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if type_id >= self.config.type_count {
            return Err(Error::UnknownType {
                id: type_id,
                count: self.config.type_count,
            });
        }
        let mut x = Array2::zeros((tokens.len() + 1, self.config.model_width));
        x.row_mut(0).assign(&self.type_embed.forward(&[type_id])?.index_axis(Axis(0), 0));
        if !tokens.is_empty() {
            let tok = self.token_embed.forward(tokens)?;
            x.slice_mut(ndarray::s![1.., ..]).assign(&tok);
        }
        let positions: Vec<usize> = (0..tokens.len() + 1).collect();
        let pos = self.pos_embed.forward(&positions)?;
        x += &pos;
        Ok(x)
    }

    fn encode_cached(
        &self,
        tokens: &[usize],
        type_id: usize,
    ) -> Result<(Array2<S>, Vec<Array2<S>>, Vec<BlockCache<S>>, Array2<S>)> {
        let x0 = self.embed(tokens, type_id)?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut h = x0.clone();
        for block in &self.blocks {
            block_inputs.push(h.clone());
            let (next, cache) = block.forward(&h);
            block_caches.push(cache);
            h = next;
        }
        Ok((h, block_inputs, block_caches, x0))
    }

    /// Applies the span attention layer when enabled, else passes through.
    pub fn span_features(&self, encoded: &Array2<S>) -> Result<Array2<S>> {
        match &self.fsa {
            Some(fsa) => Ok(fsa.forward(encoded)?.0),
            None => Ok(encoded.clone()),
        }
    }

    /// Start/end logits for every row of an encoded sequence (marker
    /// included; callers working in token space drop row 0).
    pub fn predict_boundaries(&self, features: &Array2<S>) -> Result<BoundaryLogits<S>> {
        let start = self.start_head.forward(features).index_axis(Axis(1), 0).to_owned();
        let end = self.end_head.forward(features).index_axis(Axis(1), 0).to_owned();
        BoundaryLogits::new(start, end)
    }

    /// Full differentiable path: encode, span features, boundary heads.
    /// Returned logits are in token space (marker row dropped).
    pub fn forward(&self, tokens: &[usize], type_id: usize) -> Result<(BoundaryLogits<S>, ModelCache<S>)> {
        let (encoded, block_inputs, block_caches, x0) = self.encode_cached(tokens, type_id)?;
        let (head_in, fsa_cache) = match &self.fsa {
            Some(fsa) => {
                let (out, cache) = fsa.forward(&encoded)?;
                (out, Some(cache))
            }
            None => (encoded.clone(), None),
        };
        let full = self.predict_boundaries(&head_in)?;
        let logits = BoundaryLogits::new(
            full.start.slice(ndarray::s![1..]).to_owned(),
            full.end.slice(ndarray::s![1..]).to_owned(),
        )?;
        Ok((
            logits,
            ModelCache {
                ids: tokens.to_vec(),
                type_id,
                positions: (0..tokens.len() + 1).collect(),
                x0,
                block_inputs,
                block_caches,
                encoded,
                fsa_cache,
                head_in,
            },
        ))
    }

    /// Accumulates gradients for one example. `d_logits` is in token space,
    /// matching [`SpanModel::forward`]; the marker row receives no direct
    /// loss signal.
    pub fn backward(&mut self, cache: &ModelCache<S>, d_logits: &BoundaryLogits<S>) -> Result<()> {
        let n_full = cache.head_in.nrows();
        if d_logits.seq_len() + 1 != n_full {
            return Err(Error::LengthMismatch(format!(
                "gradient length {} vs token count {}",
                d_logits.seq_len(),
                n_full - 1
            )));
        }
        let mut d_start = Array2::zeros((n_full, 1));
        let mut d_end = Array2::zeros((n_full, 1));
        for i in 0..d_logits.seq_len() {
            d_start[[i + 1, 0]] = d_logits.start[i];
            d_end[[i + 1, 0]] = d_logits.end[i];
        }
        let mut d_head_in = self.start_head.backward(&cache.head_in, &d_start);
        d_head_in += &self.end_head.backward(&cache.head_in, &d_end);
        let mut d_enc = match (&mut self.fsa, &cache.fsa_cache) {
            (Some(fsa), Some(fsa_cache)) => fsa.backward(fsa_cache, &d_head_in),
            (None, None) => d_head_in,
            _ => {
                return Err(Error::InvalidArgument(
                    "cache does not match the model's span layer".into(),
                ))
            }
        };
        for (block, (input, bcache)) in self
            .blocks
            .iter_mut()
            .zip(cache.block_inputs.iter().zip(&cache.block_caches))
            .rev()
        {
            let _ = input;
            d_enc = block.backward(bcache, &d_enc);
        }
        self.type_embed.backward(&[cache.type_id], &d_enc.slice(ndarray::s![..1, ..]).to_owned());
        if !cache.ids.is_empty() {
            self.token_embed
                .backward(&cache.ids, &d_enc.slice(ndarray::s![1.., ..]).to_owned());
        }
        self.pos_embed.backward(&cache.positions, &d_enc);
        let _ = &cache.x0;
        let _ = &cache.encoded;
        Ok(())
    }

    pub fn clamp_deltas(&mut self) {
        if let Some(fsa) = &mut self.fsa {
            fsa.clamp_deltas();
        }
    }

    /// Learned full-attention lengths `l = delta * L_span`, one per head;
    /// empty when the span layer is disabled.
    pub fn head_spans(&self) -> Vec<S> {
        self.fsa
            .as_ref()
            .map(|f| f.heads.iter().map(|h| h.l()).collect())
            .unwrap_or_default()
    }
}

impl<S: Scalar> Visit<S> for SpanModel<S> {
    fn visit(&mut self, f: &mut dyn FnMut(ParamView<'_, S>)) {
        self.token_embed.visit("embed.token", f);
        self.type_embed.visit("embed.type", f);
        self.pos_embed.visit("embed.pos", f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit(&format!("enc{i}"), f);
        }
        if let Some(fsa) = &mut self.fsa {
            fsa.visit(f);
        }
        self.start_head.visit("head.start", f);
        self.end_head.visit("head.end", f);
    }
}

/// Decodes threshold-crossing boundary pairs from token-space logits.
///
/// Each qualifying start is paired with the nearest qualifying end within
/// `l_span`; overlaps are resolved greedily by score.
pub fn decode_spans<S: Scalar>(
    logits: &BoundaryLogits<S>,
    threshold: S,
    l_span: usize,
    type_id: usize,
) -> Result<Vec<SpanPrediction<S>>> {
    if !(threshold > S::zero() && threshold < S::one()) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let n = logits.seq_len();
    let p_start: Vec<S> = logits.start.iter().map(|&z| nn::sigmoid(z)).collect();
    let p_end: Vec<S> = logits.end.iter().map(|&z| nn::sigmoid(z)).collect();
    let mut candidates = Vec::new();
    for s in 0..n {
        if p_start[s] < threshold {
            continue;
        }
        let hi = (s + l_span).min(n.saturating_sub(1));
        if let Some(e) = (s..=hi).find(|&e| p_end[e] >= threshold) {
            candidates.push(SpanPrediction {
                start: s,
                end: e,
                type_id,
                score: (p_start[s] * p_end[e]).sqrt(),
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    let mut kept: Vec<SpanPrediction<S>> = Vec::new();
    for c in candidates {
        if kept.iter().all(|k| c.start > k.end || c.end < k.start) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|p| (p.start, p.end));
    Ok(kept)
}

/// Self-describing snapshot of a model: structural config plus every named
/// parameter tensor. JSON round-trips bit-exactly for IEEE doubles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(deserialize = "S: Scalar"))]
pub struct Checkpoint<S: Scalar> {
    pub model: ModelConfig,
    pub fsa_template: FsaHeadState<S>,
    pub window: WindowMode,
    pub span_lr_scale: S,
    pub params: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn capture(model: &mut SpanModel<S>) -> Self {
        Self {
            model: model.config,
            fsa_template: model.fsa_template.clone(),
            window: model.window,
            span_lr_scale: model.span_lr_scale,
            params: nn::collect_params(model),
        }
    }

    pub fn restore(&self) -> Result<SpanModel<S>> {
        let mut model = SpanModel::new(
            self.model,
            self.fsa_template.clone(),
            self.window,
            self.span_lr_scale,
            0,
        )?;
        nn::load_params(&mut model, &self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Attenuation;
    use ndarray::Array1;
    use rand::{Rng, SeedableRng};

    fn small_config(fsa: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            model_width: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 16,
            type_count: 3,
            fsa_enabled: fsa,
            fsl_enabled: true,
        }
    }

    fn template() -> FsaHeadState<f64> {
        FsaHeadState::new(1.0, 6, 3, Attenuation::Linear).unwrap()
    }

    fn build(fsa: bool, seed: u64) -> SpanModel<f64> {
        SpanModel::new(small_config(fsa), template(), WindowMode::Backward, 1.0, seed).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(false);
        c.num_heads = 3;
        assert!(c.validate().is_err());
        c.num_heads = 2;
        assert!(c.validate().is_ok());
        c.num_layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_shape_contract_and_marker() {
        let m = build(false, 1);
        let enc = m.encode(&[1, 2, 3], 0).unwrap();
        assert_eq!(enc.dim(), (4, 8));
        let marker_only = m.encode(&[], 2).unwrap();
        assert_eq!(marker_only.dim(), (1, 8));
    }

    #[test]
    fn encode_is_deterministic_and_type_sensitive() {
        let m = build(true, 2);
        let a = m.encode(&[4, 5], 0).unwrap();
        let b = m.encode(&[4, 5], 0).unwrap();
        let c = m.encode(&[4, 5], 1).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let m = build(false, 3);
        assert!(matches!(m.encode(&[1; 17], 0), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(m.encode(&[25], 0), Err(Error::UnknownToken { .. })));
        assert!(matches!(m.encode(&[1], 9), Err(Error::UnknownType { .. })));
    }

    #[test]
    fn boundary_logits_shapes() {
        for fsa in [false, true] {
            let m = build(fsa, 4);
            let enc = m.encode(&[1, 2, 3, 4], 1).unwrap();
            let feats = m.span_features(&enc).unwrap();
            let full = m.predict_boundaries(&feats).unwrap();
            assert_eq!(full.seq_len(), 5);
            let (tok, _) = m.forward(&[1, 2, 3, 4], 1).unwrap();
            assert_eq!(tok.seq_len(), 4);
            assert_eq!(tok.start[0], full.start[1]);
        }
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let mut m = build(false, 5);
        m.start_head.weight.value.fill(0.0);
        m.start_head.bias.value.fill(0.0);
        m.end_head.weight.value.fill(0.0);
        m.end_head.bias.value.fill(0.0);
        let (logits, _) = m.forward(&[1, 2, 3], 0).unwrap();
        assert!(logits.start.iter().all(|&v| v == 0.0));
        assert!(logits.end.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_gradcheck_small() {
        use crate::boundary::{span_targets, FuzzyConfig, SideMode, SpanAnnotation};
        use crate::loss::{total_loss, LossConfig};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for fsa in [false, true] {
            let mut m = build(fsa, 17);
            // delta = 1 puts l on the mask kink at the window edge; use an
            // interior value so central differences are valid.
            if let Some(f) = &mut m.fsa {
                for head in &mut f.heads {
                    head.delta = 0.55;
                }
            }
            let tokens: Vec<usize> = (0..10).map(|_| rng.random_range(0..20)).collect();
            let gold = vec![SpanAnnotation::new(2, 4, 1)];
            let fcfg = FuzzyConfig::new(0.5, 0.3, 0.3, SideMode::BothSides).unwrap();
            let targets = vec![span_targets(&gold[0], 10, &fcfg).unwrap()];
            let lcfg = LossConfig::new(0.05, 1e-12).unwrap();

            let loss_of = |m: &SpanModel<f64>| {
                let (logits, _) = m.forward(&tokens, 1).unwrap();
                total_loss(&logits, &gold, &targets, &lcfg).unwrap().0
            };
            nn::zero_grads(&mut m);
            let (logits, cache) = m.forward(&tokens, 1).unwrap();
            let (_, d_logits) = total_loss(&logits, &gold, &targets, &lcfg).unwrap();
            m.backward(&cache, &d_logits).unwrap();

            // Sample a handful of coordinates from every parameter group.
            let mut groups: Vec<(String, usize)> = Vec::new();
            m.visit(&mut |p| {
                let len = p.value.len();
                groups.push((p.name.clone(), len));
            });
            let h = 1e-5;
            for (name, len) in groups {
                for idx in [0, len / 2, len - 1] {
                    let mut analytic = 0.0;
                    m.visit(&mut |p| {
                        if p.name == name {
                            analytic = p.grad[idx];
                        }
                    });
                    let probe = |sign: f64| {
                        let mut m2 = m.clone();
                        m2.visit(&mut |p| {
                            if p.name == name {
                                p.value[idx] += sign * h;
                            }
                        });
                        loss_of(&m2)
                    };
                    let num = (probe(1.0) - probe(-1.0)) / (2.0 * h);
                    let denom = analytic.abs().max(num.abs());
                    if denom < 1e-10 {
                        continue;
                    }
                    assert!(
                        ((analytic - num) / denom.max(1e-8)).abs() < 1e-3,
                        "fsa={fsa} {name}[{idx}]: analytic {analytic} vs numeric {num}"
                    );
                }
            }
        }
    }

    fn logits_from(p_start: &[f64], p_end: &[f64]) -> BoundaryLogits<f64> {
        // logit(p) inverts the sigmoid exactly.
        let inv = |p: f64| (p / (1.0 - p)).ln();
        BoundaryLogits::new(
            Array1::from_iter(p_start.iter().map(|&p| inv(p))),
            Array1::from_iter(p_end.iter().map(|&p| inv(p))),
        )
        .unwrap()
    }

    #[test]
    fn decode_empty_when_below_threshold() {
        let l = logits_from(&[0.2, 0.3, 0.1], &[0.4, 0.2, 0.3]);
        assert!(decode_spans(&l, 0.5, 4, 0).unwrap().is_empty());
    }

    #[test]
    fn decode_single_obvious_span() {
        let l = logits_from(
            &[0.1, 0.1, 0.1, 0.9, 0.1, 0.1, 0.1, 0.1],
            &[0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.9],
        );
        let spans = decode_spans(&l, 0.5, 10, 2).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end, spans[0].type_id), (3, 7, 2));
        assert!((spans[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn decode_prefers_nearest_end() {
        let mut p_end = vec![0.1; 10];
        p_end[5] = 0.8;
        p_end[9] = 0.95;
        let mut p_start = vec![0.1; 10];
        p_start[3] = 0.9;
        let l = logits_from(&p_start, &p_end);
        let spans = decode_spans(&l, 0.5, 10, 0).unwrap();
        assert_eq!(spans.len(), 1);
        assert_eq!((spans[0].start, spans[0].end), (3, 5));
    }

    #[test]
    fn decode_respects_span_cap() {
        let mut p_start = vec![0.1; 12];
        let mut p_end = vec![0.1; 12];
        p_start[0] = 0.9;
        p_end[11] = 0.9;
        let l = logits_from(&p_start, &p_end);
        assert!(decode_spans(&l, 0.5, 5, 0).unwrap().is_empty());
        let spans = decode_spans(&l, 0.5, 11, 0).unwrap();
        assert_eq!((spans[0].start, spans[0].end), (0, 11));
    }

    #[test]
    fn decode_matches_exhaustive_pairing_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.random_range(1..14);
            let l_span = rng.random_range(1..8);
            let p_start: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let p_end: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let l = logits_from(&p_start, &p_end);
            let got = decode_spans(&l, 0.5, l_span, 0).unwrap();

            // Oracle: enumerate all qualifying pairs, keep the minimal end
            // per start, then greedy non-overlap by score.
            let mut cands: Vec<(usize, usize, f64)> = Vec::new();
            for s in 0..n {
                if p_start[s] < 0.5 {
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for e in s..n {
                    if e - s > l_span || p_end[e] < 0.5 {
                        continue;
                    }
                    if best.is_none() || e < best.unwrap().0 {
                        best = Some((e, (p_start[s] * p_end[e]).sqrt()));
                    }
                }
                if let Some((e, sc)) = best {
                    cands.push((s, e, sc));
                }
            }
            cands.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let mut want: Vec<(usize, usize)> = Vec::new();
            for (s, e, _) in cands {
                if want.iter().all(|&(ks, ke)| s > ke || e < ks) {
                    want.push((s, e));
                }
            }
            want.sort_unstable();
            let got_pairs: Vec<(usize, usize)> = got.iter().map(|p| (p.start, p.end)).collect();
            assert_eq!(got_pairs, want, "n={n} l_span={l_span}");
            for p in &got {
                assert!(p.end - p.start <= l_span);
                assert!(p.start <= p.end);
            }
        }
    }

    #[test]
    fn decode_rejects_bad_threshold() {
        let l = logits_from(&[0.6], &[0.6]);
        assert!(decode_spans(&l, 0.0, 3, 0).is_err());
        assert!(decode_spans(&l, 1.0, 3, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        for fsa in [false, true] {
            let mut m = build(fsa, 77);
            // Perturb a delta away from init so the round trip is non-trivial.
            if let Some(f) = &mut m.fsa {
                f.heads[0].delta = 0.731;
            }
            let ck = Checkpoint::capture(&mut m);
            ck.save(&path).unwrap();
            let back: Checkpoint<f64> = Checkpoint::load(&path).unwrap();
            let mut restored = back.restore().unwrap();
            let ma = nn::collect_params(&mut m);
            let mb = nn::collect_params(&mut restored);
            assert_eq!(
                ma.keys().collect::<Vec<_>>(),
                mb.keys().collect::<Vec<_>>()
            );
            for (k, va) in &ma {
                let vb = &mb[k];
                for (i, (a, b)) in va.iter().zip(vb).enumerate() {
                    assert!(a == b, "key {k} idx {i}: {a} vs {b}");
                }
            }
            let (a, _) = m.forward(&[1, 2, 3], 0).unwrap();
            let (b, _) = restored.forward(&[1, 2, 3], 0).unwrap();
            assert_eq!(a.start, b.start);
            assert_eq!(a.end, b.end);
        }
    }

    #[test]
    fn baseline_has_no_span_layer() {
        let mut m = build(false, 9);
        assert!(m.fsa.is_none());
        assert!(m.head_spans().is_empty());
        let mut names = Vec::new();
        m.visit(&mut |p| names.push(p.name.clone()));
        assert!(names.iter().all(|n| !n.starts_with("fsa.")));
    }
}
