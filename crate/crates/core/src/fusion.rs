//! Early fusion of a visual branch and a caption branch.
//!
//! The visual branch is a two-layer MLP over feature vectors (or a small CNN
//! over images); the text branch is an embedding lookup followed by a GRU. Both
//! outputs are concatenated into one state vector. Ablation modes keep the full
//! architecture and zero the missing half, so every mode sees the same width.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    mean_pool2x2, mean_pool2x2_backward, relu, relu_backward, Conv2d, Embedding, GruCell,
    GruStepCache, Linear, ParameterSet, Tensor,
};
use crate::textmetrics::tokenize_for_metrics;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Token-to-id map with reserved PAD (0) and UNK (1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, min_count: usize) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            ids,
            min_count,
        }
    }

    /// Keeps tokens seen at least `min_count` times; ids by descending
    /// frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(captions: &[S], min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in captions {
            for tok in tokenize_for_metrics(caption.as_ref()).tokens() {
                *counts.entry(tok.clone()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Vocabulary::from_tokens(tokens, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.get(token).is_some_and(|&i| i > UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Exactly `len` ids: truncated, or right-padded with PAD.
    pub fn encode_caption(&self, caption: &str, len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize_for_metrics(caption)
            .tokens()
            .iter()
            .take(len)
            .map(|t| self.id(t))
            .collect();
        ids.resize(len, PAD_ID);
        ids
    }

    /// `min_count<TAB>n` header, then `token<TAB>id` in id order.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("min_count\t{}\n", self.min_count);
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Schema {
            file: "<vocabulary>".into(),
            line,
            message,
        };
        let mut lines = text.lines();
        let min_count = lines
            .next()
            .and_then(|h| h.strip_prefix("min_count\t"))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad(1, "expected `min_count<TAB>n` header".into()))?;
        let mut tokens = Vec::new();
        for (idx, line) in lines.enumerate() {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| bad(idx + 2, "expected `token<TAB>id`".into()))?;
            let id: usize = id
                .parse()
                .map_err(|e| bad(idx + 2, format!("bad id: {e}")))?;
            if id != tokens.len() {
                return Err(bad(idx + 2, format!("ids must be contiguous, found {id}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(bad(2, "ids 0 and 1 must be <pad> and <unk>".into()));
        }
        Ok(Vocabulary::from_tokens(tokens, min_count))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Multimodal,
    VisualOnly,
    TextOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [
        FusionMode::Multimodal,
        FusionMode::VisualOnly,
        FusionMode::TextOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Multimodal => "multimodal",
            FusionMode::VisualOnly => "visual_only",
            FusionMode::TextOnly => "text_only",
        }
    }

    fn uses_visual(self) -> bool {
        self != FusionMode::TextOnly
    }

    fn uses_text(self) -> bool {
        self != FusionMode::VisualOnly
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(FusionMode::Multimodal),
            "visual_only" => Ok(FusionMode::VisualOnly),
            "text_only" => Ok(FusionMode::TextOnly),
            other => Err(Error::InvalidInput(format!(
                "unknown mode `{other}` (expected multimodal, visual_only or text_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_visual: usize,
    pub d_text: usize,
    pub embed_dim: usize,
    pub max_caption_len: usize,
    /// Width of the hidden layer of the feature MLP.
    pub visual_hidden: usize,
    /// Set per run rather than read from config files.
    #[serde(skip)]
    pub mode: FusionMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_visual: 64,
            d_text: 64,
            embed_dim: 32,
            max_caption_len: 24,
            visual_hidden: 64,
            mode: FusionMode::Multimodal,
        }
    }
}

impl EncoderConfig {
    pub fn fused_dim(&self) -> usize {
        self.d_visual + self.d_text
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_visual == 0
            || self.d_text == 0
            || self.embed_dim == 0
            || self.max_caption_len == 0
            || self.visual_hidden == 0
        {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// What the visual branch consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VisualShape {
    Features(usize),
    /// RGB image of `height x width`.
    Image { height: usize, width: usize },
}

/// Visual input of one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualInput {
    Features(Arc<Vec<f64>>),
    /// `[3, h, w]` tensor.
    Image(Arc<Tensor>),
}

/// Network-ready observation: visual input plus caption token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedObservation {
    pub visual: VisualInput,
    pub caption_ids: Arc<Vec<usize>>,
}

/// Concatenated `[visual | text]` state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedEmbedding(pub Vec<f64>);

impl FusedEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Concatenates the two branch outputs, zeroing the half the mode excludes.
pub fn fuse(visual: &[f64], text: &[f64], mode: FusionMode) -> FusedEmbedding {
    let mut out = Vec::with_capacity(visual.len() + text.len());
    if mode.uses_visual() {
        out.extend_from_slice(visual);
    } else {
        out.resize(visual.len(), 0.0);
    }
    if mode.uses_text() {
        out.extend_from_slice(text);
    } else {
        out.resize(visual.len() + text.len(), 0.0);
    }
    FusedEmbedding(out)
}

/// [`fuse`] with dimension checks against a config.
pub fn fuse_checked(
    visual: &[f64],
    text: &[f64],
    config: &EncoderConfig,
) -> Result<FusedEmbedding> {
    if visual.len() != config.d_visual || text.len() != config.d_text {
        return Err(Error::Shape(format!(
            "fuse expects {} + {} dims, got {} + {}",
            config.d_visual,
            config.d_text,
            visual.len(),
            text.len()
        )));
    }
    Ok(fuse(visual, text, config.mode))
}

/// Embedding + GRU over a fixed-length id sequence; the final state is the
/// caption encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub gru: GruCell,
}

pub struct TextCache {
    ids: Vec<Vec<usize>>,
    steps: Vec<GruStepCache>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        vocab_size: usize,
        embed_dim: usize,
        d_text: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = Embedding::new(
            params,
            &format!("{name}.embedding"),
            vocab_size,
            embed_dim,
            Some(PAD_ID),
            rng,
        );
        let gru = GruCell::new(params, &format!("{name}.gru"), embed_dim, d_text, rng);
        TextEncoder { embedding, gru }
    }

    /// Encodes a batch of equal-length id sequences into `[batch, d_text]`.
    pub fn forward(&self, params: &ParameterSet, batch: &[&[usize]]) -> Result<(Tensor, TextCache)> {
        let len = batch
            .first()
            .ok_or_else(|| Error::Shape("empty text batch".into()))?
            .len();
        if len == 0 || batch.iter().any(|s| s.len() != len) {
            return Err(Error::Shape("text batch sequences must share a positive length".into()));
        }
        let mut h = Tensor::zeros(vec![batch.len(), self.gru.hidden_dim]);
        let mut ids_by_step = Vec::with_capacity(len);
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let ids: Vec<usize> = batch.iter().map(|s| s[t]).collect();
            let x = self.embedding.forward(params, &ids)?;
            let (next, cache) = self.gru.step(params, &x, &h)?;
            h = next;
            ids_by_step.push(ids);
            steps.push(cache);
        }
        Ok((
            h,
            TextCache {
                ids: ids_by_step,
                steps,
            },
        ))
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &TextCache, grad: &Tensor) -> Result<()> {
        let (grad_inputs, _) = self.gru.backward_sequence(params, &cache.steps, grad)?;
        for (ids, g) in cache.ids.iter().zip(&grad_inputs) {
            self.embedding.backward(params, ids, g)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VisualEncoder {
    /// `in -> hidden -> d_visual` with ReLU on the hidden layer.
    Mlp { hidden: Linear, out: Linear },
    /// conv(3->8, 3x3) / ReLU / 2x2 mean pool / conv(8->16, 3x3) / ReLU / linear.
    Cnn {
        conv1: Conv2d,
        conv2: Conv2d,
        out: Linear,
        height: usize,
        width: usize,
    },
}

pub enum VisualCache {
    Mlp {
        input: Tensor,
        pre_hidden: Tensor,
        hidden: Tensor,
    },
    Cnn {
        input: Tensor,
        pre1: Tensor,
        act1: Tensor,
        pooled: Tensor,
        pre2: Tensor,
        flat: Tensor,
    },
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        shape: VisualShape,
        hidden_dim: usize,
        d_visual: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match shape {
            VisualShape::Features(dim) => Ok(VisualEncoder::Mlp {
                hidden: Linear::new(params, &format!("{name}.hidden"), dim, hidden_dim, rng),
                out: Linear::new(params, &format!("{name}.out"), hidden_dim, d_visual, rng),
            }),
            VisualShape::Image { height, width } => {
                if height < 2 || width < 2 {
                    return Err(Error::Shape(format!("image {height}x{width} too small")));
                }
                let conv1 = Conv2d::new(params, &format!("{name}.conv1"), 3, 8, 3, 1, rng);
                let conv2 = Conv2d::new(params, &format!("{name}.conv2"), 8, 16, 3, 1, rng);
                let flat = 16 * (height / 2) * (width / 2);
                let out = Linear::new(params, &format!("{name}.out"), flat, d_visual, rng);
                Ok(VisualEncoder::Cnn {
                    conv1,
                    conv2,
                    out,
                    height,
                    width,
                })
            }
        }
    }

    fn batch_input(&self, inputs: &[&VisualInput]) -> Result<Tensor> {
        match self {
            VisualEncoder::Mlp { hidden, .. } => {
                let mut rows = Vec::with_capacity(inputs.len());
                for v in inputs {
                    match v {
                        VisualInput::Features(f) if f.len() == hidden.in_dim => rows.push(f.as_slice()),
                        VisualInput::Features(f) => {
                            return Err(Error::Shape(format!(
                                "feature vector of length {}, expected {}",
                                f.len(),
                                hidden.in_dim
                            )))
                        }
                        VisualInput::Image(_) => {
                            return Err(Error::Shape("image given to a feature encoder".into()))
                        }
                    }
                }
                Tensor::stack_rows(&rows)
            }
            VisualEncoder::Cnn { height, width, .. } => {
                let mut data = Vec::with_capacity(inputs.len() * 3 * height * width);
                for v in inputs {
                    match v {
                        VisualInput::Image(t) if t.shape() == [3, *height, *width] => {
                            data.extend_from_slice(t.data())
                        }
                        VisualInput::Image(t) => {
                            return Err(Error::Shape(format!(
                                "image {:?}, expected [3, {height}, {width}]",
                                t.shape()
                            )))
                        }
                        VisualInput::Features(_) => {
                            return Err(Error::Shape("features given to an image encoder".into()))
                        }
                    }
                }
                Tensor::new(vec![inputs.len(), 3, *height, *width], data)
            }
        }
    }

    pub fn forward(&self, params: &ParameterSet, inputs: &[&VisualInput]) -> Result<(Tensor, VisualCache)> {
        let input = self.batch_input(inputs)?;
        match self {
            VisualEncoder::Mlp { hidden, out } => {
                let pre_hidden = hidden.forward(params, &input)?;
                let h = relu(&pre_hidden);
                let y = out.forward(params, &h)?;
                Ok((
                    y,
                    VisualCache::Mlp {
                        input,
                        pre_hidden,
                        hidden: h,
                    },
                ))
            }
            VisualEncoder::Cnn {
                conv1, conv2, out, ..
            } => {
                let pre1 = conv1.forward(params, &input)?;
                let act1 = relu(&pre1);
                let pooled = mean_pool2x2(&act1)?;
                let pre2 = conv2.forward(params, &pooled)?;
                let batch = inputs.len();
                let flat_dim = pre2.len() / batch;
                let flat = relu(&pre2).reshape(vec![batch, flat_dim])?;
                let y = out.forward(params, &flat)?;
                Ok((
                    y,
                    VisualCache::Cnn {
                        input,
                        pre1,
                        act1,
                        pooled,
                        pre2,
                        flat,
                    },
                ))
            }
        }
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &VisualCache, grad: &Tensor) -> Result<()> {
        match (self, cache) {
            (
                VisualEncoder::Mlp { hidden, out },
                VisualCache::Mlp {
                    input,
                    pre_hidden,
                    hidden: h,
                },
            ) => {
                let gh = out.backward(params, h, grad)?;
                let gpre = relu_backward(pre_hidden, &gh)?;
                hidden.backward(params, input, &gpre)?;
                Ok(())
            }
            (
                VisualEncoder::Cnn {
                    conv1, conv2, out, ..
                },
                VisualCache::Cnn {
                    input,
                    pre1,
                    act1,
                    pooled,
                    pre2,
                    flat,
                },
            ) => {
                let gflat = out.backward(params, flat, grad)?;
                let gact2 = gflat.reshape(pre2.shape().to_vec())?;
                let gpre2 = relu_backward(pre2, &gact2)?;
                let gpooled = conv2.backward(params, pooled, &gpre2)?;
                let gact1 = mean_pool2x2_backward(act1.shape(), &gpooled)?;
                let gpre1 = relu_backward(pre1, &gact1)?;
                conv1.backward(params, input, &gpre1)?;
                Ok(())
            }
            _ => Err(Error::Shape("visual cache does not match encoder".into())),
        }
    }
}

/// Visual branch + text branch + concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionEncoder {
    pub config: EncoderConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
}

pub struct FusionCache {
    batch: usize,
    visual: Option<VisualCache>,
    /// Cache over distinct caption sequences, plus the row each sample maps to.
    text: Option<(TextCache, Vec<usize>)>,
}

impl FusionEncoder {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        config: &EncoderConfig,
        visual_shape: VisualShape,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let visual = VisualEncoder::new(
            params,
            "visual",
            visual_shape,
            config.visual_hidden,
            config.d_visual,
            rng,
        )?;
        let text = TextEncoder::new(params, "text", vocab_size, config.embed_dim, config.d_text, rng);
        Ok(FusionEncoder {
            config: config.clone(),
            visual,
            text,
        })
    }

    pub fn fused_dim(&self) -> usize {
        self.config.fused_dim()
    }

    /// Encodes a batch into `[batch, d_visual + d_text]`. Identical caption
    /// sequences within the batch are encoded once.
    pub fn forward(
        &self,
        params: &ParameterSet,
        batch: &[&EncodedObservation],
    ) -> Result<(Tensor, FusionCache)> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Shape("empty observation batch".into()));
        }
        let mode = self.config.mode;
        let (dv, dt) = (self.config.d_visual, self.config.d_text);

        let (visual_out, visual_cache) = if mode.uses_visual() {
            let inputs: Vec<&VisualInput> = batch.iter().map(|o| &o.visual).collect();
            let (y, c) = self.visual.forward(params, &inputs)?;
            (y, Some(c))
        } else {
            (Tensor::zeros(vec![n, dv]), None)
        };

        let (text_out, text_cache) = if mode.uses_text() {
            for o in batch {
                if o.caption_ids.len() != self.config.max_caption_len {
                    return Err(Error::Shape(format!(
                        "caption has {} ids, expected {}",
                        o.caption_ids.len(),
                        self.config.max_caption_len
                    )));
                }
            }
            let mut index: HashMap<&[usize], usize> = HashMap::new();
            let mut unique: Vec<&[usize]> = Vec::new();
            let rows: Vec<usize> = batch
                .iter()
                .map(|o| {
                    let key = o.caption_ids.as_slice();
                    *index.entry(key).or_insert_with(|| {
                        unique.push(key);
                        unique.len() - 1
                    })
                })
                .collect();
            let (encoded, cache) = self.text.forward(params, &unique)?;
            let gathered: Vec<&[f64]> = rows.iter().map(|&r| encoded.row_slice(r)).collect();
            (Tensor::stack_rows(&gathered)?, Some((cache, rows)))
        } else {
            (Tensor::zeros(vec![n, dt]), None)
        };

        let fused = Tensor::concat_cols(&[&visual_out, &text_out])?;
        Ok((
            fused,
            FusionCache {
                batch: n,
                visual: visual_cache,
                text: text_cache,
            },
        ))
    }

    /// Backward from a gradient on the fused output.
    pub fn backward(&self, params: &mut ParameterSet, cache: &FusionCache, grad: &Tensor) -> Result<()> {
        if grad.shape() != [cache.batch, self.fused_dim()] {
            return Err(Error::Shape(format!(
                "fused grad {:?}, expected [{}, {}]",
                grad.shape(),
                cache.batch,
                self.fused_dim()
            )));
        }
        let (gv, gt) = grad.split_cols(self.config.d_visual)?;
        if let Some(vc) = &cache.visual {
            self.visual.backward(params, vc, &gv)?;
        }
        if let Some((tc, rows)) = &cache.text {
            let unique = rows.iter().copied().max().map_or(0, |m| m + 1);
            let dt = self.config.d_text;
            let mut summed = Tensor::zeros(vec![unique, dt]);
            for (i, &r) in rows.iter().enumerate() {
                let src = gt.row_slice(i);
                for (d, s) in summed.data_mut()[r * dt..(r + 1) * dt].iter_mut().zip(src) {
                    *d += s;
                }
            }
            self.text.backward(params, tc, &summed)?;
        }
        Ok(())
    }

    /// Fused embedding of a single observation.
    pub fn embed(&self, params: &ParameterSet, obs: &EncodedObservation) -> Result<FusedEmbedding> {
        let (y, _) = self.forward(params, &[obs])?;
        Ok(FusedEmbedding(y.into_data()))
    }
}

/// Text-branch encoding of one id sequence, `[d_text]`.
pub fn text_encode(encoder: &TextEncoder, params: &ParameterSet, ids: &[usize]) -> Result<Vec<f64>> {
    Ok(encoder.forward(params, &[ids])?.0.into_data())
}

/// Visual-branch encoding of one input, `[d_visual]`.
pub fn visual_encode(encoder: &VisualEncoder, params: &ParameterSet, input: &VisualInput) -> Result<Vec<f64>> {
    Ok(encoder.forward(params, &[input])?.0.into_data())
}

/// Turns raw captions into cached id sequences for one vocabulary.
#[derive(Debug, Clone)]
pub struct CaptionEncoder {
    vocab: Arc<Vocabulary>,
    len: usize,
    cache: HashMap<String, Arc<Vec<usize>>>,
}

impl CaptionEncoder {
    pub fn new(vocab: Arc<Vocabulary>, len: usize) -> Self {
        CaptionEncoder {
            vocab,
            len,
            cache: HashMap::new(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encode(&mut self, caption: &str) -> Arc<Vec<usize>> {
        if let Some(ids) = self.cache.get(caption) {
            return ids.clone();
        }
        let ids = Arc::new(self.vocab.encode_caption(caption, self.len));
        self.cache.insert(caption.to_string(), ids.clone());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_threshold_and_order() {
        let vocab = Vocabulary::build(&["robot robot zap", "robot arm arm"], 2);
        assert_eq!(vocab.token(2), Some("robot"));
        assert_eq!(vocab.token(3), Some("arm"));
        assert!(!vocab.contains("zap"));
        assert_eq!(vocab.id("zap"), UNK_ID);
        assert_eq!(vocab.len(), 4);

        let empty = Vocabulary::build::<&str>(&[], 1);
        assert_eq!(empty.len(), 2);
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let vocab = Vocabulary::build(&["b a c"], 1);
        assert_eq!(
            (2..5).map(|i| vocab.token(i).unwrap()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
    }

    #[test]
    fn vocab_file_roundtrip() {
        let vocab = Vocabulary::build(&["the robot moves the cup"], 1);
        let text = vocab.to_file_string();
        assert!(text.starts_with("min_count\t1\n<pad>\t0\n<unk>\t1\nthe\t2\n"));
        assert_eq!(Vocabulary::from_file_string(&text).unwrap(), vocab);
        assert!(Vocabulary::from_file_string("junk").is_err());
    }

    #[test]
    fn encode_caption_pads_and_truncates() {
        let vocab = Vocabulary::build(&["the robot moves"], 1);
        let ids = vocab.encode_caption("The robot moves.", 5);
        assert_eq!(
            ids,
            vec![vocab.id("the"), vocab.id("robot"), vocab.id("moves"), PAD_ID, PAD_ID]
        );
        let long = vec!["the"; 30].join(" ");
        assert_eq!(vocab.encode_caption(&long, 24), vec![vocab.id("the"); 24]);
        assert_eq!(vocab.encode_caption("", 4), vec![PAD_ID; 4]);
        assert_eq!(vocab.encode_caption("unseen", 2), vec![UNK_ID, PAD_ID]);
    }

    #[test]
    fn fuse_masks_without_resizing() {
        let v = vec![1.0; 64];
        let t = vec![2.0; 64];
        assert_eq!(fuse(&v, &t, FusionMode::Multimodal).len(), 128);
        let text_only = fuse(&v, &t, FusionMode::TextOnly);
        assert!(text_only.0[..64].iter().all(|&x| x == 0.0));
        assert_eq!(
            fuse(&v, &[0.0; 64], FusionMode::Multimodal),
            fuse(&v, &t, FusionMode::VisualOnly)
        );
        let cfg = EncoderConfig::default();
        assert!(fuse_checked(&v, &t[..10], &cfg).is_err());
    }

    fn zero_biases_model(mode: FusionMode) -> (ParameterSet, FusionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParameterSet::new();
        let cfg = EncoderConfig {
            mode,
            max_caption_len: 6,
            ..EncoderConfig::default()
        };
        let enc = FusionEncoder::new(&mut ps, &cfg, VisualShape::Features(5), 10, &mut rng).unwrap();
        (ps, enc)
    }

    #[test]
    fn all_pad_and_zero_visual_encode_to_zero() {
        let (ps, enc) = zero_biases_model(FusionMode::Multimodal);
        let obs = EncodedObservation {
            visual: VisualInput::Features(Arc::new(vec![0.0; 5])),
            caption_ids: Arc::new(vec![PAD_ID; 6]),
        };
        let e = enc.embed(&ps, &obs).unwrap();
        assert!(e.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ablation_modes_match_masked_multimodal() {
        let (ps, multi) = zero_biases_model(FusionMode::Multimodal);
        let obs = EncodedObservation {
            visual: VisualInput::Features(Arc::new(vec![0.3, -1.0, 0.2, 0.9, -0.4])),
            caption_ids: Arc::new(vec![2, 5, 7, 0, 0, 0]),
        };
        let full = multi.embed(&ps, &obs).unwrap();
        for mode in [FusionMode::VisualOnly, FusionMode::TextOnly] {
            let mut ablated = multi.clone();
            ablated.config.mode = mode;
            let e = ablated.embed(&ps, &obs).unwrap();
            let (v, t) = full.0.split_at(64);
            assert_eq!(e, fuse(v, t, mode));
        }
    }

    #[test]
    fn batch_dedup_matches_individual_encoding() {
        let (ps, enc) = zero_biases_model(FusionMode::Multimodal);
        let mk = |ids: Vec<usize>, x: f64| EncodedObservation {
            visual: VisualInput::Features(Arc::new(vec![x; 5])),
            caption_ids: Arc::new(ids),
        };
        let a = mk(vec![2, 3, 0, 0, 0, 0], 0.1);
        let b = mk(vec![4, 4, 4, 0, 0, 0], -0.2);
        let c = mk(vec![2, 3, 0, 0, 0, 0], 0.7);
        let (batch, _) = enc.forward(&ps, &[&a, &b, &c]).unwrap();
        for (i, o) in [&a, &b, &c].iter().enumerate() {
            let single = enc.embed(&ps, o).unwrap();
            for (x, y) in batch.row_slice(i).iter().zip(&single.0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_inputs_are_rejected() {
        let (ps, enc) = zero_biases_model(FusionMode::Multimodal);
        let bad_visual = EncodedObservation {
            visual: VisualInput::Features(Arc::new(vec![0.0; 4])),
            caption_ids: Arc::new(vec![0; 6]),
        };
        assert!(enc.embed(&ps, &bad_visual).is_err());
        let bad_ids = EncodedObservation {
            visual: VisualInput::Features(Arc::new(vec![0.0; 5])),
            caption_ids: Arc::new(vec![99; 6]),
        };
        assert!(enc.embed(&ps, &bad_ids).is_err());
    }
}
