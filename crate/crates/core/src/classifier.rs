//! Spectrogram classifiers: a residual CNN (`resnet_lite`) and a
//! depthwise-separable CNN without skips (`mobile_lite`).

use std::fmt;
use std::str::FromStr;

use gda_autodiff::rng::stream_indexed;
use gda_autodiff::{fan_in, relative_error, Adam, AdamConfig, Conv2dSpec, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{classification_report, ClassificationMetrics, Features};
use crate::spectrogram::Spectrogram;

pub const FEATURE_DIM: usize = 64;
const STAGES: [(usize, usize, usize); 3] = [(16, 16, 1), (16, 32, 2), (32, 64, 2)];
const STEM_CHANNELS: usize = 16;
const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ResnetLite,
    MobileLite,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ResnetLite => "resnet_lite",
            Arch::MobileLite => "mobile_lite",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet_lite" => Ok(Arch::ResnetLite),
            "mobile_lite" => Ok(Arch::MobileLite),
            other => Err(Error::invalid(format!(
                "unknown architecture `{other}` (expected resnet_lite or mobile_lite)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub arch: Arch,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            arch: Arch::ResnetLite,
            lr: 1e-4,
            batch_size: 32,
            epochs: 20,
            seed: crate::DEFAULT_SEED,
            num_classes: 6,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.num_classes == 0 {
            return Err(Error::invalid("batch_size, epochs and num_classes must all be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// A `[0, 1]` image of shape `height × width` with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl LabeledImage {
    pub fn from_spectrogram(s: &Spectrogram) -> Self {
        LabeledImage {
            height: s.freq_bins(),
            width: s.frames(),
            pixels: s.pixels_f64(),
            label: s.condition.gesture as usize,
        }
    }
}

/// Stack images into a `[B, 1, H, W]` tensor mapped to `[−1, 1]`.
fn batch_tensor(images: &[&LabeledImage]) -> Result<Tensor> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) || im.pixels.len() != h * w {
            return Err(Error::invalid(format!(
                "mixed image shapes in a batch: {}×{} vs {h}×{w}",
                im.height, im.width
            )));
        }
        data.extend(im.pixels.iter().map(|p| 2.0 * p - 1.0));
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub arch: Arch,
    pub num_classes: usize,
    pub params: ParamStore,
}

/// Output of a forward pass.
pub struct ForwardOut {
    pub logits: Var,
    pub features: Var,
}

pub fn build_model(cfg: &ClassifierConfig) -> Result<ClassifierModel> {
    cfg.validate()?;
    let mut params = ParamStore::new();
    for (name, shape) in param_layout(cfg.arch, cfg.num_classes) {
        if name.ends_with(".b") {
            params.init_zeros(&name, &shape);
        } else {
            let fi = if shape.len() == 4 { fan_in(&shape, 0) } else { shape[0] };
            params.init_kaiming_uniform(cfg.seed, &name, &shape, fi);
        }
    }
    Ok(ClassifierModel {
        arch: cfg.arch,
        num_classes: cfg.num_classes,
        params,
    })
}

/// Parameter names and shapes. Conv weights are `[out, in/groups, k, k]`,
/// the head weight is `[64, G]`.
pub fn param_layout(arch: Arch, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut l = Vec::new();
    let mut conv = |name: String, cout: usize, cin_per_group: usize, k: usize| {
        l.push((format!("{name}.w"), vec![cout, cin_per_group, k, k]));
        l.push((format!("{name}.b"), vec![cout]));
    };
    conv("stem".into(), STEM_CHANNELS, 1, 3);
    for (i, &(cin, cout, _)) in STAGES.iter().enumerate() {
        match arch {
            Arch::ResnetLite => {
                conv(format!("stage{}.conv1", i + 1), cout, cin, 3);
                conv(format!("stage{}.conv2", i + 1), cout, cout, 3);
            }
            Arch::MobileLite => {
                conv(format!("stage{}.dw1", i + 1), cin, 1, 3);
                conv(format!("stage{}.pw1", i + 1), cout, cin, 1);
                conv(format!("stage{}.dw2", i + 1), cout, 1, 3);
                conv(format!("stage{}.pw2", i + 1), cout, cout, 1);
            }
        }
    }
    l.push(("head.w".into(), vec![FEATURE_DIM, num_classes]));
    l.push(("head.b".into(), vec![num_classes]));
    l
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, spec: Conv2dSpec) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, spec)?;
    Ok(g.add_channel_bias(y, b)?)
}

impl ClassifierModel {
    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Build the forward graph for `x: [B, 1, H, W]` (already in `[−1, 1]`).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<ForwardOut> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 1 || s[2] < 8 || s[3] < 8 {
            return Err(Error::invalid(format!(
                "classifier input {s:?}, expected [B, 1, H ≥ 8, W ≥ 8]"
            )));
        }
        let h = conv(g, store, "stem", x, Conv2dSpec::same(3, 2))?;
        let mut h = g.relu(h)?;
        for (i, &(cin, cout, stride)) in STAGES.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            h = match self.arch {
                Arch::ResnetLite => {
                    let b = conv(g, store, &format!("{p}.conv1"), h, Conv2dSpec::same(3, stride))?;
                    let b = g.relu(b)?;
                    let b = conv(g, store, &format!("{p}.conv2"), b, Conv2dSpec::same(3, 1))?;
                    let skip = if stride == 1 && cin == cout {
                        h
                    } else {
                        g.subsample_pad(h, cout)?
                    };
                    let sum = g.add(skip, b)?;
                    g.relu(sum)?
                }
                Arch::MobileLite => {
                    let y = conv(
                        g,
                        store,
                        &format!("{p}.dw1"),
                        h,
                        Conv2dSpec::same(3, stride).with_groups(cin),
                    )?;
                    let y = g.relu(y)?;
                    let y = conv(g, store, &format!("{p}.pw1"), y, Conv2dSpec::valid(1))?;
                    let y = g.relu(y)?;
                    let y = conv(
                        g,
                        store,
                        &format!("{p}.dw2"),
                        y,
                        Conv2dSpec::same(3, 1).with_groups(cout),
                    )?;
                    let y = g.relu(y)?;
                    let y = conv(g, store, &format!("{p}.pw2"), y, Conv2dSpec::valid(1))?;
                    g.relu(y)?
                }
            };
        }
        let features = g.global_avg_pool(h)?;
        let w = g.param(store, "head.w")?;
        let b = g.param(store, "head.b")?;
        let logits = g.linear(features, w, b)?;
        Ok(ForwardOut { logits, features })
    }
}

/// Anything that maps images to class logits and (optionally) features.
pub trait LogitSource {
    /// Per image: logits (length G) and a feature vector (may be empty).
    fn logits_and_features(&self, images: &[&LabeledImage]) -> Result<Vec<(Vec<f64>, Vec<f64>)>>;
}

impl LogitSource for ClassifierModel {
    fn logits_and_features(&self, images: &[&LabeledImage]) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let x = g.input(batch_tensor(chunk)?);
            let f = self.forward(&mut g, &self.params, x)?;
            let (lv, fv) = (g.value(f.logits).data(), g.value(f.features).data());
            let d = fv.len() / chunk.len();
            for i in 0..chunk.len() {
                out.push((
                    lv[i * self.num_classes..(i + 1) * self.num_classes].to_vec(),
                    fv[i * d..(i + 1) * d].to_vec(),
                ));
            }
        }
        Ok(out)
    }
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Cross-entropy + Adam over `cfg.epochs` epochs; each epoch visits the
/// training set in an order shuffled from `(cfg.seed, epoch)`.
pub fn train_classifier(train: &[LabeledImage], cfg: &ClassifierConfig) -> Result<(ClassifierModel, Vec<EpochStats>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    if let Some(im) = train.iter().find(|im| im.label >= cfg.num_classes) {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            im.label, cfg.num_classes
        )));
    }
    let mut model = build_model(cfg)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_indexed(cfg.seed, "classifier/shuffle", &[epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledImage> = idx.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|im| im.label).collect();
            let mut g = Graph::new();
            let x = g.input(batch_tensor(&batch)?);
            let out = model.forward(&mut g, &model.params, x)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            loss_sum += g.value(loss).item()? * batch.len() as f64;
            let lv = g.value(out.logits).data();
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(&lv[i * cfg.num_classes..(i + 1) * cfg.num_classes]) == l)
                .count();
            g.backward(loss)?;
            opt.step(&mut model.params, &g.param_grads())?;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        });
    }
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: ClassificationMetrics,
    pub predictions: Vec<usize>,
    pub features: Features,
}

/// Argmax predictions scored against the labels, plus per-sample features.
pub fn evaluate(model: &dyn LogitSource, test: &[LabeledImage], num_classes: usize) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let refs: Vec<&LabeledImage> = test.iter().collect();
    let outs = model.logits_and_features(&refs)?;
    let predictions: Vec<usize> = outs.iter().map(|(l, _)| argmax(l)).collect();
    let truth: Vec<usize> = test.iter().map(|im| im.label).collect();
    let metrics = classification_report(&predictions, &truth, num_classes)?;
    let dim = outs[0].1.len();
    let features = Features::new(test.len(), dim, outs.into_iter().flat_map(|(_, f)| f).collect())?;
    Ok(Evaluation {
        metrics,
        predictions,
        features,
    })
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of the cross-entropy of one `side × side` image, over every
/// input pixel and `per_param` sampled entries of each parameter tensor.
///
/// Biases are drawn away from zero first: with zero biases a channel whose
/// inputs are all inactive sits exactly on a ReLU kink, where central
/// differences and the subgradient disagree by construction.
pub fn gradient_check(arch: Arch, side: usize, seed: u64, h: f64, per_param: usize) -> Result<f64> {
    let cfg = ClassifierConfig {
        arch,
        seed,
        ..ClassifierConfig::default()
    };
    let mut model = build_model(&cfg)?;
    let mut rng = stream_indexed(seed, "classifier/gradcheck", &[side as u64]);
    let bias_names: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for name in bias_names {
        let b = model.params.get_mut(&name).expect("listed parameter");
        b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let x = Tensor::uniform(&[1, 1, side, side], -1.0, 1.0, &mut rng);
    let label = [rng.random_range(0..cfg.num_classes)];
    let loss = |params: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = model.forward(&mut g, params, xv)?;
        let l = g.cross_entropy(out.logits, &label)?;
        Ok(g.value(l).item()?)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = model.forward(&mut g, &model.params, xv)?;
    let l = g.cross_entropy(out.logits, &label)?;
    g.backward(l)?;
    let x_grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let param_grads = g.param_grads();

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let (mut plus, mut minus) = (x.clone(), x.clone());
        plus.data_mut()[i] += h;
        minus.data_mut()[i] -= h;
        let numeric = (loss(&model.params, &plus)? - loss(&model.params, &minus)?) / (2.0 * h);
        worst = worst.max(relative_error(x_grad.data()[i], numeric));
    }
    for (name, grad) in &param_grads {
        let n = grad.numel();
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            let mut plus = model.params.clone();
            plus.get_mut(name).expect("registered parameter").data_mut()[i] += h;
            let mut minus = model.params.clone();
            minus.get_mut(name).expect("registered parameter").data_mut()[i] -= h;
            let numeric = (loss(&plus, &x)? - loss(&minus, &x)?) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_round_trip() {
        for a in [Arch::ResnetLite, Arch::MobileLite] {
            assert_eq!(a.name().parse::<Arch>().unwrap(), a);
        }
        assert!("resnet18".parse::<Arch>().is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 6]), 0);
    }
}
