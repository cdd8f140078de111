//! The three networks: shared encoder `E`, softmax classifier `C` and
//! domain discriminator `D`, all fully connected.
//!
//! Weights are stored `in x out` so a layer computes `x W + b`. Hidden
//! layers use ReLU; output layers are linear.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor2;

const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: impl Into<Vec<usize>>) -> Self {
        Self { widths: widths.into() }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Spec(format!("{name} needs at least an input and an output width")));
        }
        if self.widths.contains(&0) {
            return Err(Error::Spec(format!("{name} has a zero width in {:?}", self.widths)));
        }
        Ok(())
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub encoder: MlpSpec,
    pub classifier: MlpSpec,
    /// `None` builds a plain classifier with no adversary.
    pub discriminator: Option<MlpSpec>,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate("encoder")?;
        self.classifier.validate("classifier")?;
        if self.classifier.widths.len() != 2 {
            return Err(Error::Spec("the classifier is a single fully connected layer".into()));
        }
        let d = self.encoder.output();
        if self.classifier.input() != d {
            return Err(Error::Spec(format!(
                "classifier input {} differs from feature dimension {d}",
                self.classifier.input()
            )));
        }
        if let Some(disc) = &self.discriminator {
            disc.validate("discriminator")?;
            if disc.input() != d {
                return Err(Error::Spec(format!("discriminator input {} differs from feature dimension {d}", disc.input())));
            }
            if disc.output() != 1 {
                return Err(Error::Spec("discriminator must emit one logit".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    fn he_uniform(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Ok(Self { weight: Tensor2::new(fan_in, fan_out, w)?, bias: Tensor2::zeros(1, fan_out)? })
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        let mut put = |t: &Tensor2| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        LinearVars { weight: put(&self.weight), bias: put(&self.bias) }
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &LinearVars) -> Result<()> {
        for (t, v) in [(&mut self.weight, vars.weight), (&mut self.bias, vars.bias)] {
            let g = tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_bias(h, self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(spec: &MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        let layers = spec.widths.windows(2).map(|w| Linear::he_uniform(w[0], w[1], rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn spec(&self) -> MlpSpec {
        let mut widths = vec![self.layers[0].in_width()];
        widths.extend(self.layers.iter().map(Linear::out_width));
        MlpSpec { widths }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    /// Tape-free forward pass.
    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.input_width() {
            return Err(Error::Dimension(format!("input width {} for a network expecting {}", x.cols(), self.input_width())));
        }
        let last = self.layers.len() - 1;
        let mut h = x.detached();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect() }
    }

    pub fn collect_grads(&mut self, tape: &Tape, vars: &MlpVars) -> Result<()> {
        for (layer, v) in self.layers.iter_mut().zip(&vars.layers) {
            layer.collect_grads(tape, v)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Parameter groups, used to pick what an optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Encoder,
    Classifier,
    Discriminator,
}

/// Parameters of `E`, `C` and (optionally) `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Mlp,
    pub classifier: Linear,
    pub discriminator: Option<Mlp>,
}

impl ModelParams {
    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init(spec: &ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(derive_seed(seed, INIT_STREAM));
        let encoder = Mlp::init(&spec.encoder, &mut rng)?;
        let classifier = Linear::he_uniform(spec.classifier.input(), spec.classifier.output(), &mut rng)?;
        let discriminator = spec.discriminator.as_ref().map(|s| Mlp::init(s, &mut rng)).transpose()?;
        Ok(Self { encoder, classifier, discriminator })
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            encoder: self.encoder.spec(),
            classifier: MlpSpec::new([self.classifier.in_width(), self.classifier.out_width()]),
            discriminator: self.discriminator.as_ref().map(Mlp::spec),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_width()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_width()
    }

    pub fn encode(&self, x: &Tensor2) -> Result<Tensor2> {
        self.encoder.forward(x)
    }

    pub fn classify(&self, features: &Tensor2) -> Result<Tensor2> {
        if features.cols() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "feature width {} for a classifier expecting {}",
                features.cols(),
                self.feature_dim()
            )));
        }
        self.classifier.forward(features)
    }

    pub fn discriminate(&self, features: &Tensor2) -> Result<Tensor2> {
        let disc = self.discriminator.as_ref().ok_or_else(|| Error::State("model has no discriminator".into()))?;
        disc.forward(features)
    }

    /// Class predictions for raw inputs.
    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        Ok(self.classify(&self.encode(x)?)?.argmax_rows())
    }

    /// Records the parameters on `tape`; groups not listed in `trainable`
    /// become constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: &[Group]) -> ParamVars {
        ParamVars {
            encoder: self.encoder.bind(tape, trainable.contains(&Group::Encoder)),
            classifier: self.classifier.bind(tape, trainable.contains(&Group::Classifier)),
            discriminator: self.discriminator.as_ref().map(|d| d.bind(tape, trainable.contains(&Group::Discriminator))),
        }
    }

    /// Every tensor with its stable name, encoder first, discriminator last.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &layer.weight));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        if let Some(disc) = &self.discriminator {
            for (i, layer) in disc.layers.iter().enumerate() {
                out.push((format!("discriminator.{i}.weight"), &layer.weight));
                out.push((format!("discriminator.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    /// Mutable tensors of the requested groups, in [`named_tensors`](Self::named_tensors) order.
    pub fn named_tensors_mut(&mut self, groups: &[Group]) -> Vec<(String, &mut Tensor2)> {
        let mut out = Vec::new();
        if groups.contains(&Group::Encoder) {
            for (i, layer) in self.encoder.layers.iter_mut().enumerate() {
                out.push((format!("encoder.{i}.weight"), &mut layer.weight));
                out.push((format!("encoder.{i}.bias"), &mut layer.bias));
            }
        }
        if groups.contains(&Group::Classifier) {
            out.push(("classifier.weight".into(), &mut self.classifier.weight));
            out.push(("classifier.bias".into(), &mut self.classifier.bias));
        }
        if groups.contains(&Group::Discriminator) {
            if let Some(disc) = &mut self.discriminator {
                for (i, layer) in disc.layers.iter_mut().enumerate() {
                    out.push((format!("discriminator.{i}.weight"), &mut layer.weight));
                    out.push((format!("discriminator.{i}.bias"), &mut layer.bias));
                }
            }
        }
        out
    }

    /// Copies tape gradients into the gradient slots of the given groups.
    /// Parameters the loss did not reach get a zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &ParamVars, groups: &[Group]) -> Result<()> {
        if groups.contains(&Group::Encoder) {
            self.encoder.collect_grads(tape, &vars.encoder)?;
        }
        if groups.contains(&Group::Classifier) {
            self.classifier.collect_grads(tape, &vars.classifier)?;
        }
        if groups.contains(&Group::Discriminator) {
            if let (Some(d), Some(v)) = (&mut self.discriminator, &vars.discriminator) {
                d.collect_grads(tape, v)?;
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

/// Tape handles for a bound [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub encoder: MlpVars,
    pub classifier: LinearVars,
    pub discriminator: Option<MlpVars>,
}

impl ParamVars {
    /// Applies the single shared encoder.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.encoder.forward(tape, x)
    }

    pub fn classify(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.classifier.forward(tape, features)
    }

    pub fn discriminate(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.discriminator
            .as_ref()
            .ok_or_else(|| Error::State("model has no discriminator".into()))?
            .forward(tape, features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ArchSpec {
        ArchSpec {
            encoder: MlpSpec::new([4, 8, 3]),
            classifier: MlpSpec::new([3, 2]),
            discriminator: Some(MlpSpec::new([3, 5, 5, 1])),
        }
    }

    fn zeroed(mut p: ModelParams) -> ModelParams {
        for (_, t) in p.named_tensors_mut(&[Group::Encoder, Group::Classifier, Group::Discriminator]) {
            t.values_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelParams::init(&arch(), 9).unwrap();
        let b = ModelParams::init(&arch(), 9).unwrap();
        let c = ModelParams::init(&arch(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = ModelParams::init(&arch(), 1).unwrap();
        for (name, t) in p.named_tensors() {
            if name.ends_with("bias") {
                assert!(t.values().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn weight_spread_matches_fan_in() {
        let spec = ArchSpec {
            encoder: MlpSpec::new([100, 100]),
            classifier: MlpSpec::new([100, 2]),
            discriminator: None,
        };
        let p = ModelParams::init(&spec, 3).unwrap();
        let w = p.encoder.layers[0].weight.values();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!((sd / target - 1.0).abs() < 0.1, "sd {sd} vs {target}");
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let mut bad = arch();
        bad.classifier = MlpSpec::new([4, 2]);
        assert!(matches!(ModelParams::init(&bad, 0), Err(Error::Spec(_))));
        let mut bad = arch();
        bad.discriminator = Some(MlpSpec::new([3, 2]));
        assert!(matches!(ModelParams::init(&bad, 0), Err(Error::Spec(_))));
        let mut bad = arch();
        bad.encoder = MlpSpec::new([4]);
        assert!(ModelParams::init(&bad, 0).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let p = zeroed(ModelParams::init(&arch(), 0).unwrap());
        let x = Tensor2::new(2, 4, vec![1.0, -2.0, 3.0, 0.5, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let f = p.encode(&x).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
        let logits = p.classify(&f).unwrap();
        assert_eq!(logits.shape(), (2, 2));
        assert!(logits.softmax_rows().values().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let d = p.discriminate(&f).unwrap();
        assert_eq!(d.shape(), (2, 1));
        assert!(d.values().iter().all(|&v| crate::autodiff::sigmoid(v) == 0.5));
    }

    #[test]
    fn single_layer_encoder_is_affine() {
        let spec = ArchSpec { encoder: MlpSpec::new([2, 2]), classifier: MlpSpec::new([2, 2]), discriminator: None };
        let p = ModelParams::init(&spec, 4).unwrap();
        let x = Tensor2::new(1, 2, vec![0.3, -0.7]).unwrap();
        let l = &p.encoder.layers[0];
        assert_eq!(p.encode(&x).unwrap(), x.matmul(&l.weight).unwrap().add_row(&l.bias).unwrap());
    }

    #[test]
    fn shared_encoder_same_input_same_features() {
        let p = ModelParams::init(&arch(), 2).unwrap();
        let x = Tensor2::new(3, 4, (0..12).map(|v| v as f64 * 0.1 - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &[Group::Encoder]);
        let xs = tape.constant(x.clone());
        let xt = tape.constant(x.clone());
        let fs = vars.encode(&mut tape, xs).unwrap();
        let ft = vars.encode(&mut tape, xt).unwrap();
        assert_eq!(tape.value(fs), tape.value(ft));
        assert_eq!(tape.value(fs), &p.encode(&x).unwrap());
    }

    #[test]
    fn classifier_follows_sign_of_first_feature() {
        let spec = ArchSpec { encoder: MlpSpec::new([2, 2]), classifier: MlpSpec::new([2, 2]), discriminator: None };
        let mut p = ModelParams::init(&spec, 0).unwrap();
        // logit_0 = -f0, logit_1 = f0
        p.classifier.weight = Tensor2::new(2, 2, vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
        let f = Tensor2::new(3, 2, vec![2.0, 5.0, -1.0, 3.0, 0.5, -9.0]).unwrap();
        assert_eq!(p.classify(&f).unwrap().argmax_rows(), vec![1, 0, 1]);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let p = ModelParams::init(&arch(), 0).unwrap();
        let x = Tensor2::zeros(1, 5).unwrap();
        assert!(matches!(p.encode(&x), Err(Error::Dimension(_))));
        let f = Tensor2::zeros(1, 4).unwrap();
        assert!(matches!(p.classify(&f), Err(Error::Dimension(_))));
        assert!(matches!(p.discriminate(&f), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_count_formula() {
        let a = arch();
        let p = ModelParams::init(&a, 0).unwrap();
        let expected = a.encoder.parameter_count()
            + a.classifier.parameter_count()
            + a.discriminator.as_ref().unwrap().parameter_count();
        assert_eq!(p.parameter_count(), expected);
        assert_eq!(expected, (4 * 8 + 8 + 8 * 3 + 3) + (3 * 2 + 2) + (3 * 5 + 5 + 5 * 5 + 5 + 5 + 1));
    }

    #[test]
    fn forward_is_pure() {
        let p = ModelParams::init(&arch(), 5).unwrap();
        let x = Tensor2::new(2, 4, vec![0.1, 0.2, 0.3, 0.4, -0.1, -0.2, -0.3, -0.4]).unwrap();
        assert_eq!(p.encode(&x).unwrap(), p.encode(&x).unwrap());
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut p = ModelParams::init(&arch(), 5).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape, &[Group::Encoder, Group::Classifier]);
        let x = tape.constant(Tensor2::new(1, 4, vec![0.5; 4]).unwrap());
        let f = vars.encode(&mut tape, x).unwrap();
        let d = vars.discriminate(&mut tape, f).unwrap();
        let l = tape.bce_with_logits(d, &[1.0]).unwrap();
        tape.backward(l).unwrap();
        let disc = vars.discriminator.as_ref().unwrap();
        assert!(tape.grad(disc.layers[0].weight).is_none());
        p.collect_grads(&tape, &vars, &[Group::Encoder, Group::Classifier]).unwrap();
        assert!(p.discriminator.as_ref().unwrap().layers[0].weight.grad().is_none());
        assert!(p.encoder.layers[0].weight.grad().is_some());
        // classifier was bound trainable but unused: zero gradient
        assert!(p.classifier.weight.grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
