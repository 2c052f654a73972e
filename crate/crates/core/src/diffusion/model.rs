use gda_autodiff::{fan_in, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::csi::ConditionLabel;
use crate::error::{Error, Result};
use crate::manifest::Vocab;

/// Condition fed to the denoiser. `None` in a field is the null token, whose
/// embedding contribution is zero; an all-`None` value is the unconditional
/// input used for classifier-free guidance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct CondIds {
    pub gesture: Option<usize>,
    pub location: Option<usize>,
    pub orientation: Option<usize>,
}

impl CondIds {
    pub const NULL: CondIds = CondIds {
        gesture: None,
        location: None,
        orientation: None,
    };

    pub fn from_label(c: &ConditionLabel) -> Self {
        CondIds {
            gesture: Some(c.gesture as usize),
            location: Some(c.location as usize),
            orientation: Some(c.orientation as usize),
        }
    }

    pub fn is_null(&self) -> bool {
        *self == CondIds::NULL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    /// Channels at full resolution; the two coarser levels use twice this.
    pub base_channels: usize,
    pub emb_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            height: 64,
            width: 64,
            base_channels: 8,
            emb_dim: 32,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "denoiser input {}×{} must be non-empty multiples of 4",
                self.height, self.width
            )));
        }
        if self.base_channels == 0 || self.emb_dim < 2 || !self.emb_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "denoiser needs base_channels ≥ 1 and an even emb_dim ≥ 2",
            ));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of diffusion steps, `[sin(t·ω_k), cos(t·ω_k)]` with
/// `ω_k = 10000^{−k/(d/2)}`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let row_start = out.len();
        out.resize(row_start + dim, 0.0);
        for k in 0..half {
            let w = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            out[row_start + k] = (t as f64 * w).sin();
            out[row_start + half + k] = (t as f64 * w).cos();
        }
    }
    Tensor::new(vec![ts.len(), dim], out).expect("embedding shape")
}

/// Compact conditional ε-prediction network: two-level strided conv encoder,
/// single-head self-attention at the coarsest level, conv decoder with skip
/// concatenations, and a condition + timestep embedding injected as
/// per-channel biases.
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub vocab: Vocab,
}

const LN_EPS: f64 = 1e-5;

impl Denoiser {
    pub fn new(config: DenoiserConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        Ok(Denoiser { config, vocab })
    }

    /// `(name, shape, init)` for every parameter.
    fn layout(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.config.base_channels;
        let c2 = 2 * c;
        let e = self.config.emb_dim;
        let mut l: Vec<(String, Vec<usize>, Init)> = Vec::new();
        let conv = |l: &mut Vec<_>, name: &str, cout: usize, cin: usize, init: Init| {
            l.push((format!("{name}.w"), vec![cout, cin, 3, 3], init));
            l.push((format!("{name}.b"), vec![cout], Init::Zeros));
        };
        conv(&mut l, "enc1.conv1", c, 1, Init::Kaiming);
        conv(&mut l, "enc1.conv2", c, c, Init::Kaiming);
        conv(&mut l, "down1.conv1", c2, c, Init::Kaiming);
        conv(&mut l, "down1.conv2", c2, c2, Init::Kaiming);
        conv(&mut l, "down2.conv", c2, c2, Init::Kaiming);
        conv(&mut l, "mid.conv", c2, c2, Init::Kaiming);
        conv(&mut l, "up2.conv", c2, 2 * c2, Init::Kaiming);
        conv(&mut l, "up1.conv", c, c2 + c, Init::Kaiming);
        conv(&mut l, "out.conv", 1, c, Init::Zeros);
        let linear = |l: &mut Vec<_>, name: &str, din: usize, dout: usize| {
            l.push((format!("{name}.w"), vec![din, dout], Init::Kaiming));
            l.push((format!("{name}.b"), vec![dout], Init::Zeros));
        };
        linear(&mut l, "temb.fc1", e, e);
        linear(&mut l, "temb.fc2", e, e);
        for (name, ch) in [
            ("enc1", c),
            ("down1", c2),
            ("down2", c2),
            ("mid", c2),
            ("up2", c2),
            ("up1", c),
        ] {
            linear(&mut l, &format!("{name}.emb"), e, ch);
        }
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            linear(&mut l, name, c2, c2);
        }
        l.push(("attn.ln.gain".into(), vec![c2], Init::Ones));
        l.push(("attn.ln.bias".into(), vec![c2], Init::Zeros));
        for (name, n) in [
            ("cond.gesture", self.vocab.gestures),
            ("cond.location", self.vocab.locations),
            ("cond.orientation", self.vocab.orientations),
        ] {
            l.push((name.into(), vec![n as usize, e], Init::Normal));
        }
        l
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape, init) in self.layout() {
            match init {
                Init::Zeros => store.init_zeros(&name, &shape),
                Init::Ones => store.init_ones(&name, &shape),
                Init::Normal => store.init_normal(seed, &name, &shape, 1.0),
                Init::Kaiming => {
                    // Conv weights are [out, in, k, k]; linear weights [in, out].
                    let fi = if shape.len() == 4 { fan_in(&shape, 0) } else { shape[0] };
                    store.init_kaiming_uniform(seed, &name, &shape, fi)
                }
            }
        }
        store
    }

    /// Check that `store` holds every parameter with the expected shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        for (name, shape, _) in self.layout() {
            let t = store.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_cond(&self, cond: &[CondIds]) -> Result<()> {
        let v = self.vocab;
        for c in cond {
            for (field, id, size) in [
                ("gesture", c.gesture, v.gestures),
                ("location", c.location, v.locations),
                ("orientation", c.orientation, v.orientations),
            ] {
                if let Some(id) = id {
                    if id >= size as usize {
                        return Err(Error::InvalidCondition {
                            field,
                            id: id.min(u16::MAX as usize) as u16,
                            size,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Build the forward graph for `x: [B, 1, H, W]` and return the predicted
    /// noise node (same shape).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ts: &[usize], cond: &[CondIds]) -> Result<Var> {
        let cfg = self.config;
        let b = ts.len();
        if g.shape(x) != [b, 1, cfg.height, cfg.width] || cond.len() != b {
            return Err(Error::invalid(format!(
                "denoiser input {:?} with {} steps and {} conditions, expected [{b}, 1, {}, {}]",
                g.shape(x),
                ts.len(),
                cond.len(),
                cfg.height,
                cfg.width
            )));
        }
        self.check_cond(cond)?;
        let c2 = 2 * cfg.base_channels;

        // Embedding: MLP(sinusoid(t)) + Σ condition tables, then SiLU.
        let t_in = g.input(timestep_embedding(ts, cfg.emb_dim));
        let h = self.linear(g, store, "temb.fc1", t_in)?;
        let h = g.silu(h)?;
        let mut emb = self.linear(g, store, "temb.fc2", h)?;
        let tables: [(&str, Vec<Option<usize>>); 3] = [
            ("cond.gesture", cond.iter().map(|c| c.gesture).collect()),
            ("cond.location", cond.iter().map(|c| c.location).collect()),
            ("cond.orientation", cond.iter().map(|c| c.orientation).collect()),
        ];
        for (name, ids) in &tables {
            let table = g.param(store, name)?;
            let e = g.embedding(table, ids)?;
            emb = g.add(emb, e)?;
        }
        let emb = g.silu(emb)?;

        let h1 = self.conv(g, store, "enc1.conv1", x, 1)?;
        let h1 = self.inject(g, store, "enc1.emb", h1, emb)?;
        let h1 = g.silu(h1)?;
        let h1 = self.conv(g, store, "enc1.conv2", h1, 1)?;
        let h1 = g.silu(h1)?;

        let h2 = self.conv(g, store, "down1.conv1", h1, 2)?;
        let h2 = self.inject(g, store, "down1.emb", h2, emb)?;
        let h2 = g.silu(h2)?;
        let h2 = self.conv(g, store, "down1.conv2", h2, 1)?;
        let h2 = g.silu(h2)?;

        let h3 = self.conv(g, store, "down2.conv", h2, 2)?;
        let h3 = self.inject(g, store, "down2.emb", h3, emb)?;
        let h3 = g.silu(h3)?;

        let h3 = self.attention_block(g, store, h3, b, c2)?;
        let m = self.conv(g, store, "mid.conv", h3, 1)?;
        let m = self.inject(g, store, "mid.emb", m, emb)?;
        let m = g.silu(m)?;

        let u2 = g.upsample2x(m)?;
        let u2 = g.concat(u2, h2, 1)?;
        let u2 = self.conv(g, store, "up2.conv", u2, 1)?;
        let u2 = self.inject(g, store, "up2.emb", u2, emb)?;
        let u2 = g.silu(u2)?;

        let u1 = g.upsample2x(u2)?;
        let u1 = g.concat(u1, h1, 1)?;
        let u1 = self.conv(g, store, "up1.conv", u1, 1)?;
        let u1 = self.inject(g, store, "up1.emb", u1, emb)?;
        let u1 = g.silu(u1)?;
        self.conv(g, store, "out.conv", u1, 1)
    }

    fn conv(&self, g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = g.param(store, &format!("{name}.w"))?;
        let b = g.param(store, &format!("{name}.b"))?;
        let y = g.conv2d(x, w, Conv2dSpec::same(3, stride))?;
        Ok(g.add_channel_bias(y, b)?)
    }

    fn linear(&self, g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{name}.w"))?;
        let b = g.param(store, &format!("{name}.b"))?;
        Ok(g.linear(x, w, b)?)
    }

    /// Add a per-sample, per-channel projection of the embedding.
    fn inject(&self, g: &mut Graph, store: &ParamStore, name: &str, h: Var, emb: Var) -> Result<Var> {
        let p = self.linear(g, store, name, emb)?;
        let (b, c) = (g.shape(p)[0], g.shape(p)[1]);
        let p = g.reshape(p, &[b, c, 1, 1])?;
        Ok(g.add_broadcast(h, p)?)
    }

    /// Pre-norm single-head self-attention with a residual connection over
    /// the spatial positions of `x: [B, C, h, w]`.
    fn attention_block(&self, g: &mut Graph, store: &ParamStore, x: Var, b: usize, c: usize) -> Result<Var> {
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let l = h * w;
        let tokens = g.reshape(x, &[b, c, l])?;
        let tokens = g.permute(tokens, &[0, 2, 1])?;
        let flat = g.reshape(tokens, &[b * l, c])?;
        let gain = g.param(store, "attn.ln.gain")?;
        let bias = g.param(store, "attn.ln.bias")?;
        let normed = g.layer_norm(flat, gain, bias, LN_EPS)?;
        let mut qkv = Vec::with_capacity(3);
        for name in ["attn.q", "attn.k", "attn.v"] {
            let y = self.linear(g, store, name, normed)?;
            qkv.push(g.reshape(y, &[b, l, c])?);
        }
        let a = g.attention(qkv[0], qkv[1], qkv[2])?;
        let a = g.reshape(a, &[b * l, c])?;
        let a = self.linear(g, store, "attn.o", a)?;
        let out = g.add(flat, a)?;
        let out = g.reshape(out, &[b, l, c])?;
        let out = g.permute(out, &[0, 2, 1])?;
        Ok(g.reshape(out, &[b, c, h, w])?)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming,
    Zeros,
    Ones,
    Normal,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shape_matches_input() {
        let cfg = DenoiserConfig {
            height: 8,
            width: 12,
            base_channels: 2,
            emb_dim: 4,
        };
        let d = Denoiser::new(cfg, Vocab::default()).unwrap();
        let store = d.init_params(1);
        d.check_params(&store).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 1, 8, 12]));
        let cond = [CondIds::NULL, CondIds::from_label(&ConditionLabel::default())];
        let y = d.forward(&mut g, &store, x, &[1, 5], &cond).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 8, 12]);
    }

    #[test]
    fn invalid_condition_is_rejected() {
        let cfg = DenoiserConfig {
            height: 4,
            width: 4,
            base_channels: 1,
            emb_dim: 2,
        };
        let d = Denoiser::new(cfg, Vocab::default()).unwrap();
        let store = d.init_params(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let bad = CondIds {
            gesture: Some(6),
            ..CondIds::NULL
        };
        assert!(matches!(
            d.forward(&mut g, &store, x, &[1], &[bad]),
            Err(Error::InvalidCondition { .. })
        ));
    }

    #[test]
    fn embedding_row_values() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(&e.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((e.data()[4] - 3f64.sin()).abs() < 1e-15);
        assert!((e.data()[5] - (3.0f64 * 0.01).sin()).abs() < 1e-15);
    }
}
