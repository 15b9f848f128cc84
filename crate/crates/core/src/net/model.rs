//! The four network modules and their composition.
//!
//! * SFE: U-Net style encoder, each block two 3×3 conv + ReLU then 2×2 max
//!   pool. A mirrored decoder exists only for unsupervised pretraining.
//! * TFE: stacked LSTM over the tendon history, zero initial state.
//! * FF: temporal vector tiled over the spatial grid and concatenated as
//!   extra channels; a 7×7 conv over `[avg, max]` channel pools gives a
//!   sigmoid attention map that multiplies the fused features.
//! * PP: flatten, dropout, one affine layer to `3n` coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{NetConfig, Variant};
use crate::error::{Error, Result};
use crate::sim::TendonDisplacement;
use crate::tensor::{init_lstm_cell, lstm_cell, Graph, ParamStore, PoolMode, Tensor, Var};

/// The last `T` tendon displacement vectors, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TendonWindow(Vec<TendonDisplacement>);

impl TendonWindow {
    pub fn new(steps: Vec<TendonDisplacement>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Contract("tendon window is empty".into()));
        }
        if steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Contract("tendon window holds non-finite values".into()));
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> &[TendonDisplacement] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn current(&self) -> &TendonDisplacement {
        self.0.last().expect("non-empty window")
    }
}

/// Fixed affine maps around the trainable network: tendon input scale,
/// per-channel standardisation of encoder features, and per-coordinate
/// de-standardisation of the predicted points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub tendon_scale: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(cfg: &NetConfig) -> Self {
        let c = cfg.bottleneck_shape()[2];
        Self {
            tendon_scale: 1.0,
            feature_mean: vec![0.0; c],
            feature_std: vec![1.0; c],
            target_mean: vec![0.0; cfg.outputs()],
            target_std: vec![1.0; cfg.outputs()],
        }
    }

    fn features_are_identity(&self) -> bool {
        self.feature_mean.iter().all(|&m| m == 0.0) && self.feature_std.iter().all(|&s| s == 1.0)
    }

    fn targets_are_identity(&self) -> bool {
        self.target_mean.iter().all(|&m| m == 0.0) && self.target_std.iter().all(|&s| s == 1.0)
    }
}

const GATE_EPS: f64 = 1.0 / (1u64 << 40) as f64;

/// Image-side input to a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum SpatialInput<'a> {
    /// Raw `[H, W, 3]` image, encoded inside the graph.
    Image(&'a Tensor),
    /// Precomputed encoder output from a frozen SFE.
    Features(&'a Tensor),
}

/// Dropout seeding for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutKey {
    pub train: bool,
    pub seed: u64,
    pub call: u64,
}

impl DropoutKey {
    pub const EVAL: DropoutKey = DropoutKey {
        train: false,
        seed: 0,
        call: 0,
    };
}

/// Output nodes of [`StNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predicted points, `[n, 3]`.
    pub points: Var,
    /// Attention map `[h, w, 1]`, full variant only.
    pub attention: Option<Var>,
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("consistent shape")
}

fn insert_conv(store: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize, rng: &mut impl Rng) -> Result<()> {
    store.insert(format!("{name}.k"), he_uniform(&[k, k, cin, cout], k * k * cin, rng))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]))
}

/// Read a weight either as a trainable parameter or as a frozen constant.
fn weight(g: &mut Graph, store: &ParamStore, name: &str, frozen: bool) -> Result<Var> {
    if frozen {
        Ok(g.input(store.get(name)?.clone()))
    } else {
        g.param(store, name)
    }
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, pad: usize, frozen: bool) -> Result<Var> {
    let k = weight(g, store, &format!("{name}.k"), frozen)?;
    let b = weight(g, store, &format!("{name}.b"), frozen)?;
    g.conv2d(x, k, b, 1, pad)
}

/// Run encoder blocks `0..blocks` on `x`, returning each block's output.
pub fn encoder_blocks(g: &mut Graph, store: &ParamStore, x: Var, blocks: usize, frozen: bool) -> Result<Vec<Var>> {
    let mut taps = Vec::with_capacity(blocks);
    let mut h = x;
    for i in 0..blocks {
        let a = conv(g, store, &format!("sfe.b{i}.conv1"), h, 1, frozen)?;
        let a = g.relu(a);
        let a = conv(g, store, &format!("sfe.b{i}.conv2"), a, 1, frozen)?;
        let a = g.relu(a);
        h = g.maxpool2x2(a)?;
        taps.push(h);
    }
    Ok(taps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StNet {
    pub config: NetConfig,
    pub variant: Variant,
}

impl StNet {
    pub fn new(config: NetConfig, variant: Variant) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, variant })
    }

    /// Encoder weights only.
    pub fn init_encoder(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let mut cin = self.config.image_channels;
        for (i, &cout) in self.config.ladder.iter().enumerate() {
            insert_conv(store, &format!("sfe.b{i}.conv1"), 3, cin, cout, rng)?;
            insert_conv(store, &format!("sfe.b{i}.conv2"), 3, cout, cout, rng)?;
            cin = cout;
        }
        Ok(())
    }

    /// Decoder stage channel pairs, deepest first, ending at image channels.
    fn decoder_ladder(&self) -> Vec<(usize, usize)> {
        let l = &self.config.ladder;
        (0..l.len())
            .map(|i| {
                let cin = l[l.len() - 1 - i];
                let cout = if i + 1 < l.len() { l[l.len() - 2 - i] } else { self.config.image_channels };
                (cin, cout)
            })
            .collect()
    }

    /// Encoder plus mirrored decoder, for pretraining.
    pub fn init_autoencoder(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.init_encoder(&mut store, &mut rng)?;
        for (i, (cin, cout)) in self.decoder_ladder().into_iter().enumerate() {
            insert_conv(&mut store, &format!("dec.s{i}.conv1"), 3, cin, cout, &mut rng)?;
            insert_conv(&mut store, &format!("dec.s{i}.conv2"), 3, cout, cout, &mut rng)?;
        }
        Ok(store)
    }

    /// Every parameter of this variant, freshly initialised from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if self.variant.uses_image() {
            self.init_encoder(&mut store, &mut rng)?;
        }
        if self.variant.uses_tendons() {
            for layer in 0..cfg.lstm_layers {
                let input = if layer == 0 { cfg.tendon_dim } else { cfg.hidden };
                init_lstm_cell(&mut store, &format!("tfe.l{layer}"), input, cfg.hidden, &mut rng)?;
            }
        }
        if self.variant.uses_attention() {
            let k = cfg.attention_kernel;
            store.insert("ff.att.k", he_uniform(&[k, k, 2, 1], k * k * 2, &mut rng))?;
            store.insert("ff.att.b", Tensor::zeros(&[1]))?;
        }
        let d = cfg.predictor_inputs(self.variant);
        let bound = 1.0 / (d as f64).sqrt();
        let w = (0..d * cfg.outputs()).map(|_| rng.gen_range(-bound..bound)).collect();
        store.insert("pp.w", Tensor::new(vec![d, cfg.outputs()], w)?)?;
        store.insert("pp.b", Tensor::zeros(&[cfg.outputs()]))?;
        Ok(store)
    }

    /// Encode an image to the bottleneck feature map.
    pub fn sfe_encode(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let (h, w, c) = g.value(image).dims3("sfe_encode")?;
        let cfg = &self.config;
        if (h, w, c) != (cfg.image_height, cfg.image_width, cfg.image_channels) {
            return Err(Error::Config(format!(
                "image is {h}x{w}x{c}, profile {} expects {}x{}x{}",
                cfg.profile, cfg.image_height, cfg.image_width, cfg.image_channels
            )));
        }
        let taps = encoder_blocks(g, store, image, cfg.ladder.len(), false)?;
        Ok(*taps.last().expect("non-empty ladder"))
    }

    /// Decode bottleneck features back to an image in (0, 1).
    pub fn sfe_decode(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let shape = g.value(features).shape().to_vec();
        if shape != self.config.bottleneck_shape() {
            return Err(Error::dim(
                "sfe_decode",
                format!("feature shape {shape:?}"),
                self.config.bottleneck_shape().iter().product(),
                g.value(features).len(),
            ));
        }
        let stages = self.decoder_ladder().len();
        let mut h = features;
        for i in 0..stages {
            h = g.upsample2x(h)?;
            h = conv(g, store, &format!("dec.s{i}.conv1"), h, 1, false)?;
            h = g.relu(h);
            h = conv(g, store, &format!("dec.s{i}.conv2"), h, 1, false)?;
            h = if i + 1 == stages { g.sigmoid(h) } else { g.relu(h) };
        }
        Ok(h)
    }

    /// Final top-layer hidden state after running the stacked LSTM over the
    /// window from a zero state.
    pub fn tfe_encode(&self, g: &mut Graph, store: &ParamStore, window: &TendonWindow, tendon_scale: f64) -> Result<Var> {
        if window.is_empty() {
            return Err(Error::Contract("tendon window is empty".into()));
        }
        let cfg = &self.config;
        let zero = Tensor::zeros(&[cfg.hidden]);
        let mut h: Vec<Var> = (0..cfg.lstm_layers).map(|_| g.input(zero.clone())).collect();
        let mut c = h.clone();
        for q in window.steps() {
            let mut x = g.input(Tensor::from_vec(q.iter().map(|v| v * tendon_scale).collect()));
            for layer in 0..cfg.lstm_layers {
                let (hn, cn) = lstm_cell(g, store, &format!("tfe.l{layer}"), x, h[layer], c[layer])?;
                h[layer] = hn;
                c[layer] = cn;
                x = hn;
            }
        }
        Ok(h[cfg.lstm_layers - 1])
    }

    /// Fuse spatial features `[h, w, Cs]` with a temporal vector `[Hd]`.
    ///
    /// Returns the fused map `[h, w, Cs + Hd]` and, when `attention` is set,
    /// the attention map that scaled it.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, spatial: Var, temporal: Var, attention: bool) -> Result<(Var, Option<Var>)> {
        let (h, w, _) = g.value(spatial).dims3("fuse")?;
        let tiled = g.tile(temporal, h, w)?;
        let f = g.concat(&[spatial, tiled])?;
        if !attention {
            return Ok((f, None));
        }
        let avg = g.channel_pool(f, PoolMode::Avg)?;
        let max = g.channel_pool(f, PoolMode::Max)?;
        let pooled = g.concat(&[avg, max])?;
        let k = g.param(store, "ff.att.k")?;
        let b = g.param(store, "ff.att.b")?;
        let pad = (self.config.attention_kernel - 1) / 2;
        let logits = g.conv2d(pooled, k, b, 1, pad)?;
        // σ rounds to exactly 0 or 1 for |logit| ≳ 37; the affine squeeze keeps
        // the gate strictly inside (0, 1). ε is a power of two, so σ = ½ maps
        // to ½ exactly.
        let s = g.sigmoid(logits);
        let s = g.scale(s, 1.0 - 2.0 * GATE_EPS);
        let floor = g.input(Tensor::full(&[h, w, 1], GATE_EPS));
        let m = g.add(s, floor)?;
        Ok((g.mul_map(f, m)?, Some(m)))
    }

    /// Flatten, dropout, affine projection to `3n` values.
    pub fn predict_points(&self, g: &mut Graph, store: &ParamStore, fused: Var, dropout: DropoutKey) -> Result<Var> {
        let flat = g.flatten(fused)?;
        let expected = store.get("pp.w")?.shape()[0];
        if g.value(flat).len() != expected {
            return Err(Error::Config(format!(
                "predictor expects {expected} inputs, fused features have {}",
                g.value(flat).len()
            )));
        }
        let dropped = g.dropout(flat, self.config.dropout, dropout.train, dropout.seed, dropout.call)?;
        let w = g.param(store, "pp.w")?;
        let b = g.param(store, "pp.b")?;
        g.linear(dropped, w, b)
    }

    fn standardize_features(&self, g: &mut Graph, feats: Var, norm: &Normalizer) -> Result<Var> {
        if norm.features_are_identity() {
            return Ok(feats);
        }
        let (h, w, c) = g.value(feats).dims3("standardize")?;
        if norm.feature_mean.len() != c || norm.feature_std.len() != c {
            return Err(Error::dim("standardize", "feature channels", c, norm.feature_mean.len()));
        }
        let mean = g.input(Tensor::new(vec![h, w, c], norm.feature_mean.repeat(h * w))?);
        let inv = g.input(Tensor::new(
            vec![h, w, c],
            norm.feature_std.iter().map(|s| 1.0 / s).collect::<Vec<_>>().repeat(h * w),
        )?);
        let centered = g.sub(feats, mean)?;
        g.mul(centered, inv)
    }

    /// Full forward pass for this variant.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        norm: &Normalizer,
        window: &TendonWindow,
        spatial: SpatialInput<'_>,
        dropout: DropoutKey,
    ) -> Result<Forward> {
        let spatial_features = if self.variant.uses_image() {
            let feats = match spatial {
                SpatialInput::Image(img) => {
                    let x = g.input(img.clone());
                    self.sfe_encode(g, store, x)?
                }
                SpatialInput::Features(f) => {
                    if f.shape() != self.config.bottleneck_shape() {
                        return Err(Error::Config(format!(
                            "precomputed features {:?} do not match bottleneck {:?}",
                            f.shape(),
                            self.config.bottleneck_shape()
                        )));
                    }
                    g.input(f.clone())
                }
            };
            Some(self.standardize_features(g, feats, norm)?)
        } else {
            None
        };
        let temporal = if self.variant.uses_tendons() {
            Some(self.tfe_encode(g, store, window, norm.tendon_scale)?)
        } else {
            None
        };
        let (fused, attention) = match (spatial_features, temporal) {
            (Some(s), Some(t)) => self.fuse(g, store, s, t, self.variant.uses_attention())?,
            (Some(s), None) => (s, None),
            (None, Some(t)) => (t, None),
            (None, None) => unreachable!("every variant uses at least one stream"),
        };
        let raw = self.predict_points(g, store, fused, dropout)?;
        let out = if norm.targets_are_identity() {
            raw
        } else {
            let std = g.input(Tensor::from_vec(norm.target_std.clone()));
            let mean = g.input(Tensor::from_vec(norm.target_mean.clone()));
            let scaled = g.mul(raw, std)?;
            g.add(scaled, mean)?
        };
        let points = g.reshape(out, &[self.config.points, 3])?;
        Ok(Forward { points, attention })
    }

    /// Evaluation-mode prediction as a plain `[n, 3]` tensor.
    pub fn predict(&self, store: &ParamStore, norm: &Normalizer, window: &TendonWindow, spatial: SpatialInput<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, norm, window, spatial, DropoutKey::EVAL)?;
        Ok(g.value(out.points).clone())
    }

    /// Encoder output for one image using frozen weights.
    pub fn encode_image(&self, encoder: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let f = self.sfe_encode(&mut g, encoder, x)?;
        Ok(g.value(f).clone())
    }
}
