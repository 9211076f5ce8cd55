//! Full forecasting pipeline: instance normalization, channel attention,
//! period downsampling, linear encoding, the two transformer stages and
//! the decoding back onto the prediction horizon.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{
    block_forward, decode, encode, prl_forward, AffineWeights, BlockWeights,
};
use crate::crl::{crl_forward_batch, CrlWeights};
use crate::data::io::{read_tensor, read_u32, write_tensor};
use crate::data::{de_downsample, downsample, NormStats};
use crate::error::{fmt_shape, Error, Result};
use crate::tensor::{Parameter, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters and ablation switches.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CtpNetConfig {
    /// Look-back window length.
    pub l_in: usize,
    /// Prediction horizon.
    pub l_out: usize,
    /// Downsample period (number of subsequences).
    pub p: usize,
    /// Temporal-query period.
    pub w: usize,
    /// Hidden width of the encoded representation.
    pub d: usize,
    /// Heads of the channel attention.
    pub h_c: usize,
    /// Heads of the efficient-attention blocks.
    pub h_b: usize,
    pub n_channels: usize,
    #[serde(default)]
    pub ablate_i1: bool,
    #[serde(default)]
    pub ablate_i2: bool,
    #[serde(default)]
    pub ablate_i3: bool,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub dropout: f64,
}

fn default_blocks() -> usize {
    1
}

impl CtpNetConfig {
    /// Defaults for everything that is not data-dependent; the caller
    /// still has to fill in `l_out`, `p`, `w` and `n_channels`.
    pub fn with_defaults(n_channels: usize, l_out: usize, p: usize, w: usize) -> CtpNetConfig {
        CtpNetConfig {
            l_in: 96,
            l_out,
            p,
            w,
            d: 128,
            h_c: 4,
            h_b: 4,
            n_channels,
            ablate_i1: false,
            ablate_i2: false,
            ablate_i3: false,
            blocks: 1,
            dropout: 0.0,
        }
    }

    pub fn n_pin(&self) -> usize {
        self.l_in / self.p
    }

    pub fn n_pout(&self) -> usize {
        self.l_out / self.p
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_in", self.l_in),
            ("l_out", self.l_out),
            ("p", self.p),
            ("w", self.w),
            ("d", self.d),
            ("h_c", self.h_c),
            ("h_b", self.h_b),
            ("n_channels", self.n_channels),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return Err(Error::ConfigInvalid(format!("{name} must be positive")));
            }
        }
        if self.l_in % self.p != 0 || self.l_out % self.p != 0 {
            return Err(Error::ConfigInvalid(format!(
                "period {} must divide both look-back {} and horizon {}; {}",
                self.p,
                self.l_in,
                self.l_out,
                nearest_valid_periods(self.l_in, self.l_out, self.p)
            )));
        }
        if self.l_in % self.h_c != 0 {
            return Err(Error::ConfigInvalid(format!(
                "h_c {} must divide look-back {}",
                self.h_c, self.l_in
            )));
        }
        if self.d % self.h_b != 0 {
            return Err(Error::ConfigInvalid(format!(
                "h_b {} must divide hidden width {}",
                self.h_b, self.d
            )));
        }
        if self.p % self.h_b != 0 {
            return Err(Error::ConfigInvalid(format!(
                "h_b {} must divide period {} (transposed block width)",
                self.h_b, self.p
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::ConfigInvalid(
                "dropout is exposed for config compatibility but only 0 is supported".into(),
            ));
        }
        Ok(())
    }
}

/// Valid downsample periods sorted by distance from the requested one.
pub fn nearest_valid_periods(l_in: usize, l_out: usize, p: usize) -> String {
    let g = gcd(l_in, l_out);
    let mut divisors: Vec<usize> = (1..=g).filter(|d| g % d == 0).collect();
    divisors.sort_by_key(|&d| (d.abs_diff(p), d));
    let shown: Vec<String> = divisors.iter().take(4).map(|d| d.to_string()).collect();
    format!("nearest valid periods: {}", shown.join(", "))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-(instance, channel) look-back statistics used to undo the
/// normalization on the forecast.
pub struct InstanceStats {
    mean: Vec<f64>,
    denom: Vec<f64>,
    batch: usize,
    n_channels: usize,
}

impl InstanceStats {
    /// Re-applies scale and shift on a (B, N_c, L) tensor, in-graph.
    pub fn invert(&self, y: &Tensor) -> Result<Tensor> {
        if y.rank() != 3 || y.shape()[0] != self.batch || y.shape()[1] != self.n_channels {
            return Err(Error::ShapeMismatch(format!(
                "instance stats for ({}, {}, _) applied to {}",
                self.batch,
                self.n_channels,
                fmt_shape(y.shape())
            )));
        }
        let l = y.shape()[2];
        let mut scale = Vec::with_capacity(y.numel());
        let mut shift = Vec::with_capacity(y.numel());
        for i in 0..self.batch * self.n_channels {
            scale.extend(std::iter::repeat_n(self.denom[i], l));
            shift.extend(std::iter::repeat_n(self.mean[i], l));
        }
        let scale = Tensor::from_vec(scale, y.shape())?;
        let shift = Tensor::from_vec(shift, y.shape())?;
        y.mul(&scale)?.add(&shift)
    }
}

/// Normalizes each (instance, channel) look-back slice to zero mean and
/// unit std. The divisor is max(std, eps) so that non-degenerate slices
/// are removed exactly and constant slices map to zero.
pub fn instance_norm(x: &Tensor) -> Result<(Tensor, InstanceStats)> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "instance_norm expects (batch, channels, look_back), got {}",
            fmt_shape(x.shape())
        )));
    }
    let (b, n_c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    let mut mean = Vec::with_capacity(b * n_c);
    let mut denom = Vec::with_capacity(b * n_c);
    let mut out = vec![0.0; src.len()];
    for i in 0..b * n_c {
        let row = &src[i * l..(i + 1) * l];
        let m = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / l as f64;
        let s = var.sqrt().max(INSTANCE_NORM_EPS);
        for (o, &v) in out[i * l..(i + 1) * l].iter_mut().zip(row) {
            *o = (v - m) / s;
        }
        mean.push(m);
        denom.push(s);
    }
    Ok((
        Tensor::from_vec(out, x.shape())?,
        InstanceStats {
            mean,
            denom,
            batch: b,
            n_channels: n_c,
        },
    ))
}

/// The assembled model. Ablated stages own no parameters at all, so
/// parameter counts reflect the active architecture.
pub struct CtpNet {
    pub config: CtpNetConfig,
    pub crl: Option<CrlWeights>,
    pub encoder: AffineWeights,
    pub trl: Vec<BlockWeights>,
    pub prl: Vec<BlockWeights>,
    pub decoder: AffineWeights,
}

impl CtpNet {
    pub fn new(config: CtpNetConfig, seed: u64) -> Result<CtpNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crl = if config.ablate_i1 {
            None
        } else {
            Some(CrlWeights::new(
                config.n_channels,
                config.l_in,
                config.w,
                config.h_c,
                &mut rng,
            )?)
        };
        let encoder = AffineWeights::new("encoder", config.n_pin(), config.d, &mut rng);
        let trl = if config.ablate_i2 {
            Vec::new()
        } else {
            (0..config.blocks)
                .map(|i| BlockWeights::new(&format!("trl.{i}"), config.d, config.h_b, &mut rng))
                .collect::<Result<Vec<_>>>()?
        };
        let prl = if config.ablate_i3 {
            Vec::new()
        } else {
            (0..config.blocks)
                .map(|i| BlockWeights::new(&format!("prl.{i}"), config.p, config.h_b, &mut rng))
                .collect::<Result<Vec<_>>>()?
        };
        let decoder = AffineWeights::new("decoder", config.d, config.n_pout(), &mut rng);
        let model = CtpNet {
            config,
            crl,
            encoder,
            trl,
            prl,
            decoder,
        };
        model.check_unique_names()?;
        Ok(model)
    }

    fn check_unique_names(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for p in self.params() {
            if !seen.insert(p.name().to_string()) {
                return Err(Error::ConfigInvalid(format!(
                    "duplicate parameter name {}",
                    p.name()
                )));
            }
        }
        Ok(())
    }

    /// All parameters in a fixed declaration order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        if let Some(crl) = &self.crl {
            out.extend(crl.params());
        }
        out.extend(self.encoder.params());
        for b in &self.trl {
            out.extend(b.params());
        }
        for b in &self.prl {
            out.extend(b.params());
        }
        out.extend(self.decoder.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        if let Some(crl) = &mut self.crl {
            out.extend(crl.params_mut());
        }
        out.extend(self.encoder.params_mut());
        for b in &mut self.trl {
            out.extend(b.params_mut());
        }
        for b in &mut self.prl {
            out.extend(b.params_mut());
        }
        out.extend(self.decoder.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn describe(&self) -> ModelSummary {
        ModelSummary {
            entries: self
                .params()
                .iter()
                .map(|p| (p.name().to_string(), p.shape().to_vec()))
                .collect(),
            total: self.param_count(),
        }
    }

    /// Forward pass over a batch of look-back windows with their absolute
    /// start indices. Returns forecasts of shape (B, N_c, L_out).
    pub fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[1] != cfg.n_channels || x.shape()[2] != cfg.l_in {
            return Err(Error::ShapeMismatch(format!(
                "forward expects (batch, {}, {}), got {}",
                cfg.n_channels,
                cfg.l_in,
                fmt_shape(x.shape())
            )));
        }
        if ts.len() != x.shape()[0] {
            return Err(Error::ShapeMismatch(format!(
                "{} start indices for batch {}",
                ts.len(),
                x.shape()[0]
            )));
        }

        let (x_norm, stats) = instance_norm(x)?;
        let x_res = match &self.crl {
            Some(crl) => {
                let i1 = crl_forward_batch(crl, &x_norm, ts)?;
                x_norm.add(&i1)?
            }
            None => x_norm,
        };
        let x_ds = downsample(&x_res, cfg.p)?;
        let z = encode(&self.encoder, &x_ds)?;
        let u = if self.trl.is_empty() {
            z
        } else {
            let mut h = z.clone();
            for blk in &self.trl {
                h = block_forward(blk, &h)?;
            }
            z.add(&h)?
        };
        let i3 = if self.prl.is_empty() {
            u
        } else {
            let mut h = u;
            for blk in &self.prl {
                h = prl_forward(blk, &h)?;
            }
            h
        };
        let y_ds = decode(&self.decoder, &i3)?;
        let y_norm = de_downsample(&y_ds, cfg.p)?;
        stats.invert(&y_norm)
    }
}

/// Parameter name/shape listing plus the total count.
pub struct ModelSummary {
    pub entries: Vec<(String, Vec<usize>)>,
    pub total: usize,
}

impl std::fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, shape) in &self.entries {
            writeln!(f, "{name:<24} {}", fmt_shape(shape))?;
        }
        write!(f, "total parameters: {}", self.total)
    }
}

// ── Checkpointing ────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"CTPN";
const CKPT_VERSION: u32 = 1;

/// JSON header stored inside a checkpoint. The normalization block makes
/// saved models usable for forecasting in original units.
#[derive(Serialize, Deserialize, Clone, Default)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub dataset: Option<String>,
    #[serde(default)]
    pub norm_mean: Option<Vec<f64>>,
    #[serde(default)]
    pub norm_std: Option<Vec<f64>>,
    #[serde(default)]
    pub channel_names: Option<Vec<String>>,
}

impl CheckpointMeta {
    pub fn with_norm(dataset: &str, stats: &NormStats, names: &[String]) -> CheckpointMeta {
        CheckpointMeta {
            dataset: Some(dataset.to_string()),
            norm_mean: Some(stats.mean.data().to_vec()),
            norm_std: Some(stats.std.data().to_vec()),
            channel_names: Some(names.to_vec()),
        }
    }

    pub fn norm_stats(&self) -> Option<NormStats> {
        let mean = self.norm_mean.as_ref()?;
        let std = self.norm_std.as_ref()?;
        Some(NormStats {
            mean: Tensor::from_vec(mean.clone(), &[mean.len()]).ok()?,
            std: Tensor::from_vec(std.clone(), &[std.len()]).ok()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: CtpNetConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

/// Writes config, metadata and every named parameter as a binary record.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &CtpNet, meta: &CheckpointMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let header = CheckpointHeader {
        config: model.config.clone(),
        meta: meta.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("header encode: {e}")))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        write_tensor(&mut w, p.value())?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a model from a checkpoint; every parameter must be present
/// with a matching shape.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CtpNet, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut r)? as usize;
    let mut header_buf = vec![0u8; header_len];
    r.read_exact(&mut header_buf)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_buf)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;

    let n_params = read_u32(&mut r)? as usize;
    let mut stored: HashMap<String, Tensor> = HashMap::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        stored.insert(name, read_tensor(&mut r)?);
    }

    let mut model = CtpNet::new(header.config.clone(), 0)?;
    let expected = model.params().len();
    if stored.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model needs {expected}",
            stored.len()
        )));
    }
    for p in model.params_mut() {
        let t = stored.remove(p.name()).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing parameter {}", p.name()))
        })?;
        if t.shape() != p.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {}, expected {}",
                p.name(),
                fmt_shape(t.shape()),
                fmt_shape(p.shape())
            )));
        }
        p.set_data(t.data().to_vec())?;
    }
    Ok((model, header.meta))
}
