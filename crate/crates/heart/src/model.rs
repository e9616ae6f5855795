//! The HEART forecaster: attention preprocessor, spatio-temporal
//! convolutional encoder, 1x1 decoder, and a dense regressor head.
//!
//! Stages for the default pre-encoder placement:
//!
//! 1. attention: `[S,F,T] → [S,F,T]` (identity for the baseline);
//! 2. encoder: `H_lat × S` distinct convolutions over all stations and
//!    a bounded time lag, linearly combined across features, ReLU;
//! 3. decoder: learned 1x1 combination of the latent channels, ReLU;
//! 4. regressor: affine `t_in → t_out` map applied per station, no
//!    activation.
//!
//! The alternative placement applies the attention block to the latent
//! `[S, H_lat, T]` tensor between encoder and decoder.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, init_attention, AttentionConfig, AttentionParams, Placement,
};
use crate::error::{Error, Result};
use crate::tensor::{component_seed, Graph, Mode, Rng, Tensor, Var, RNG_ALGORITHM};

fn default_latent() -> usize {
    16
}

fn default_conv_lag() -> usize {
    3
}

fn default_encoder_dropout() -> f64 {
    0.1
}

/// Dimensions and hyperparameters of one model. Accepted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of measurement stations S.
    pub stations: usize,
    /// Number of input features F.
    pub features: usize,
    /// Input window length T.
    pub t_in: usize,
    /// Output horizon length.
    pub t_out: usize,
    /// Latent channel count of the encoder.
    #[serde(default = "default_latent")]
    pub latent_features: usize,
    /// Maximum temporal kernel extent of the encoder convolution.
    #[serde(default = "default_conv_lag")]
    pub conv_lag: usize,
    /// Dropout rate applied after the encoder activation.
    #[serde(default = "default_encoder_dropout")]
    pub encoder_dropout: f64,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stations", self.stations),
            ("features", self.features),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("latent_features", self.latent_features),
            ("conv_lag", self.conv_lag),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.conv_lag > self.t_in {
            return Err(Error::Config(format!(
                "conv_lag {} exceeds t_in {}",
                self.conv_lag, self.t_in
            )));
        }
        if !(0.0..1.0).contains(&self.encoder_dropout) {
            return Err(Error::Config(format!(
                "encoder_dropout must lie in [0, 1), got {}",
                self.encoder_dropout
            )));
        }
        self.attention.validate()
    }

    /// Feature dimension the attention block operates on, which
    /// depends on its placement.
    pub fn attention_feature_dim(&self) -> usize {
        match self.attention.placement {
            Placement::PreEncoder => self.features,
            Placement::BetweenEncoderDecoder => self.latent_features,
        }
    }
}

/// All learnable tensors of a model, generic over storage
/// (`Tensor` at rest, `Var` once bound into a graph).
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub attention: AttentionParams<T>,
    /// `[H_lat, S, S, conv_lag]` spatio-temporal filters.
    pub enc_kernels: T,
    /// `[H_lat, F]` feature combination weights.
    pub enc_mix: T,
    /// `[H_lat]`.
    pub enc_bias: T,
    /// `[H_lat]` decoder channel weights.
    pub dec_w: T,
    /// `[1]`.
    pub dec_b: T,
    /// `[t_out, t_in]` regressor, shared across stations.
    pub reg_w: T,
    /// `[t_out]`.
    pub reg_b: T,
}

impl<A> ModelParams<A> {
    pub fn map<B>(&self, f: &mut impl FnMut(&str, &A) -> B) -> ModelParams<B> {
        ModelParams {
            attention: self.attention.map("attention", f),
            enc_kernels: f("encoder.kernels", &self.enc_kernels),
            enc_mix: f("encoder.mix", &self.enc_mix),
            enc_bias: f("encoder.bias", &self.enc_bias),
            dec_w: f("decoder.w", &self.dec_w),
            dec_b: f("decoder.b", &self.dec_b),
            reg_w: f("regressor.w", &self.reg_w),
            reg_b: f("regressor.b", &self.reg_b),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &A)) {
        self.map(&mut |name, t| f(name, t));
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut A)) {
        self.attention.for_each_mut("attention", f);
        f("encoder.kernels", &mut self.enc_kernels);
        f("encoder.mix", &mut self.enc_mix);
        f("encoder.bias", &mut self.enc_bias);
        f("decoder.w", &mut self.dec_w);
        f("decoder.b", &mut self.dec_b);
        f("regressor.w", &mut self.reg_w);
        f("regressor.b", &mut self.reg_b);
    }
}

impl ModelParams<Tensor> {
    /// Binds every tensor as a gradient-carrying leaf, recording
    /// `(name, Var)` pairs.
    pub fn bind(&self, g: &mut Graph, names: &mut Vec<(String, Var)>) -> ModelParams<Var> {
        self.map(&mut |name, t| {
            let var = g.leaf(t.clone());
            names.push((name.to_string(), var));
            var
        })
    }

    /// Binds parameters without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph) -> ModelParams<Var> {
        self.map(&mut |_, t| g.constant(t.clone()))
    }
}

/// A configured model with its parameters.
#[derive(Debug, Clone)]
pub struct HeartModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

impl HeartModel {
    /// Initializes a model. Each component draws from its own
    /// sub-stream of `seed`, so models that differ only in their
    /// attention variant share identical encoder/decoder/regressor
    /// initializations.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (s, f, t, t_out) = (config.stations, config.features, config.t_in, config.t_out);
        let (h, lag) = (config.latent_features, config.conv_lag);

        let attention =
            init_attention(&config.attention, config.attention_feature_dim(), t, seed)?;
        let mut enc_rng = Rng::seed(component_seed(seed, "encoder"));
        let enc_kernels = uniform_tensor(&mut enc_rng, &[h, s, s, lag], s * lag);
        let enc_mix = uniform_tensor(&mut enc_rng, &[h, f], f);
        let enc_bias = Tensor::zeros(&[h]).with_grad();
        let mut dec_rng = Rng::seed(component_seed(seed, "decoder"));
        let dec_w = uniform_tensor(&mut dec_rng, &[h], h);
        let dec_b = Tensor::zeros(&[1]).with_grad();
        let mut reg_rng = Rng::seed(component_seed(seed, "regressor"));
        let reg_w = uniform_tensor(&mut reg_rng, &[t_out, t], t);
        let reg_b = Tensor::zeros(&[t_out]).with_grad();

        Ok(Self {
            config,
            params: ModelParams {
                attention,
                enc_kernels,
                enc_mix,
                enc_bias,
                dec_w,
                dec_b,
                reg_w,
                reg_b,
            },
        })
    }

    /// Eval- or train-mode forward pass on a plain tensor.
    pub fn predict(&self, x: &Tensor, rng: &mut Rng, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let bound = self.params.bind_frozen(&mut g);
        let out = heart_forward(&mut g, xv, &self.config, &bound, rng, mode)?;
        Ok(g.value(out).clone())
    }

    /// Snapshot of all parameter tensors keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        self.params.for_each(&mut |name, t| {
            map.insert(name.to_string(), t.clone());
        });
        map
    }

    /// Restores parameters from a snapshot taken on an identically
    /// configured model.
    pub fn restore(&mut self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut missing = Vec::new();
        self.params.for_each_mut(&mut |name, t| match snapshot.get(name) {
            Some(saved) if saved.shape() == t.shape() => {
                let mut fresh = saved.clone();
                fresh.requires_grad = true;
                *t = fresh;
            }
            _ => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "snapshot missing or misshapen tensors: {missing:?}"
            )));
        }
        Ok(())
    }

    // ── checkpoint file format ──────────────────────────────────────
    //
    // 8-byte magic "HEARTCK1", u64 little-endian header length, a JSON
    // header { format_version, prng, config, tensors: [{name, shape}] },
    // then each tensor's elements as little-endian f64 in header order.

    const MAGIC: &'static [u8; 8] = b"HEARTCK1";

    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u32,
            prng: &'a str,
            config: &'a ModelConfig,
            tensors: Vec<TensorMeta>,
        }
        #[derive(Serialize)]
        struct TensorMeta {
            name: String,
            shape: Vec<usize>,
        }

        let mut entries: Vec<(String, Tensor)> = Vec::new();
        self.params.for_each(&mut |name, t| {
            entries.push((name.to_string(), t.clone()));
        });
        let tensors = entries
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            format_version: 1,
            prng: RNG_ALGORITHM,
            config: &self.config,
            tensors,
        })?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(Self::MAGIC)?;
        file.write_all(&(header.len() as u64).to_le_bytes())?;
        file.write_all(&header)?;
        for (_, t) in &entries {
            for v in t.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format_version: u32,
            prng: String,
            config: ModelConfig,
            tensors: Vec<TensorMeta>,
        }
        #[derive(Deserialize)]
        struct TensorMeta {
            name: String,
            shape: Vec<usize>,
        }

        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.format_version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        if header.prng != RNG_ALGORITHM {
            return Err(Error::Checkpoint(format!(
                "checkpoint pinned prng {:?}, this build uses {RNG_ALGORITHM:?}",
                header.prng
            )));
        }

        let mut snapshot = BTreeMap::new();
        for meta in &header.tensors {
            let n: usize = meta.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            file.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "non-finite value {bad} in tensor {}",
                    meta.name
                )));
            }
            snapshot.insert(
                meta.name.clone(),
                Tensor::new(&meta.shape, data)?.with_grad(),
            );
        }

        let mut model = HeartModel::new(header.config, 0)?;
        model.restore(&snapshot)?;
        Ok(model)
    }
}

// ── forward stages ──────────────────────────────────────────────────

/// Encoder: spatio-temporal convolution over all stations with kernel
/// extent `conv_lag`, feature combination, ReLU. `[S,F,T] → [S,H_lat,T]`.
pub fn encoder_forward(g: &mut Graph, x: Var, params: &ModelParams<Var>) -> Result<Var> {
    let conv = g.spatio_temporal_conv(x, params.enc_kernels, params.enc_mix, params.enc_bias)?;
    Ok(g.relu(conv))
}

/// Decoder: learned 1x1 combination over the latent channel axis,
/// ReLU. `[S,H_lat,T] → [S,T]`.
pub fn decoder_forward(g: &mut Graph, latent: Var, params: &ModelParams<Var>) -> Result<Var> {
    let combined = g.channel_combine(latent, params.dec_w, params.dec_b)?;
    Ok(g.relu(combined))
}

/// Regressor: affine `t_in → t_out` map applied identically per
/// station, no activation. `[S,T] → [S,t_out]`.
pub fn regressor_forward(g: &mut Graph, y: Var, params: &ModelParams<Var>) -> Result<Var> {
    g.affine_rows(y, params.reg_w, params.reg_b)
}

/// Full model forward pass with the attention block at its configured
/// placement.
pub fn heart_forward(
    g: &mut Graph,
    x: Var,
    config: &ModelConfig,
    params: &ModelParams<Var>,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    let expected = [config.stations, config.features, config.t_in];
    if g.value(x).shape() != expected {
        return Err(Error::Shape(format!(
            "model input shape {:?}, config expects {expected:?}",
            g.value(x).shape()
        )));
    }
    let y = match config.attention.placement {
        Placement::PreEncoder => {
            let att = attention_forward(g, x, &config.attention, &params.attention, rng, mode)?;
            let latent = encoder_forward(g, att, params)?;
            let latent = g.dropout(latent, config.encoder_dropout, mode, rng)?;
            decoder_forward(g, latent, params)?
        }
        Placement::BetweenEncoderDecoder => {
            let latent = encoder_forward(g, x, params)?;
            let latent = g.dropout(latent, config.encoder_dropout, mode, rng)?;
            let att =
                attention_forward(g, latent, &config.attention, &params.attention, rng, mode)?;
            decoder_forward(g, att, params)?
        }
    };
    regressor_forward(g, y, params)
}
