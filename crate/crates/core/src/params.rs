//! Named learnable parameters, non-learnable buffers (batch-norm running
//! statistics, input normalization), and the forward context that binds
//! them onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnStats, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvKernel,
    BnGamma,
    BnBeta,
    ScaleScalar,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default)]
pub struct ModelParams<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return config_err(format!("duplicate parameter name {name}"));
        }
        if kind == ParamKind::ScaleScalar && value.shape() != [1, 1, 1, 1] {
            return config_err(format!("scale parameter {name} must be (1,1,1,1)"));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, kind, value, grad: None });
        Ok(())
    }

    /// He-style init: N(0, 2/fan_in) with fan_in = C_in·k·k of dim 1..4.
    pub fn add_conv(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.add_conv_scaled(name, shape, fan_in, 1.0, rng)
    }

    /// He-style init with the standard deviation multiplied by `gain`.
    pub fn add_conv_scaled(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(normal.sample(rng))).collect();
        self.add(name, ParamKind::ConvKernel, Tensor::from_vec(shape, data)?)
    }

    /// gamma = 1, beta = 0, running mean 0, running variance 1.
    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> Result<()> {
        let shape = [1, channels, 1, 1];
        self.add(format!("{prefix}.gamma"), ParamKind::BnGamma, Tensor::full(shape, T::one()))?;
        self.add(format!("{prefix}.beta"), ParamKind::BnBeta, Tensor::zeros(shape))?;
        self.set_buffer(format!("{prefix}.running_mean"), Tensor::zeros(shape));
        self.set_buffer(format!("{prefix}.running_var"), Tensor::full(shape, T::one()));
        Ok(())
    }

    pub fn add_scale(&mut self, name: impl Into<String>) -> Result<()> {
        self.add(name, ParamKind::ScaleScalar, Tensor::scalar(T::zero()))
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn require(&self, name: &str) -> Result<&Parameter<T>> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total learnable element count.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    /// Merges another collection. Names must not collide.
    pub fn extend(&mut self, other: ModelParams<T>) -> Result<()> {
        for p in other.params {
            self.add(p.name, p.kind, p.value)?;
        }
        self.buffers.extend(other.buffers);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
            index: self.index.clone(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.sq_norm().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            .sqrt()
    }

    pub fn param_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.value.sq_norm().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            .sqrt()
    }
}

/// One forward evaluation: a fresh tape plus lazily bound parameter leaves.
/// Binding a name twice returns the same leaf, so a parameter used by both
/// passes accumulates gradient from both uses.
pub struct Graph<'m, T: Real> {
    pub tape: Tape<T>,
    model: &'m mut ModelParams<T>,
    bound: HashMap<String, Var>,
    mode: Mode,
}

impl<'m, T: Real> Graph<'m, T> {
    pub fn new(model: &'m mut ModelParams<T>, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: HashMap::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn model(&self) -> &ModelParams<T> {
        self.model
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.model.require(name)?.value.clone();
        let v = self.tape.leaf(value, true);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, x: Tensor<T>) -> Var {
        self.tape.constant(x)
    }

    pub fn conv(&mut self, x: Var, weight: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(weight)?;
        self.tape.conv2d(x, w, stride, pad)
    }

    /// Batch norm using `{prefix}.gamma`, `{prefix}.beta` and the running
    /// statistics buffers. Train mode updates the buffers with momentum
    /// [`BN_MOMENTUM`] (unbiased variance).
    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        match self.mode {
            Mode::Train => {
                let (out, moments) = self.tape.batch_norm(x, gamma, beta, BnStats::Batch)?;
                let moments = moments.expect("batch mode returns moments");
                let keep = T::lit(BN_MOMENTUM);
                let take = T::one() - keep;
                let correction = if moments.count > 1 {
                    T::from_usize(moments.count).unwrap() / T::from_usize(moments.count - 1).unwrap()
                } else {
                    T::one()
                };
                let c = moments.mean.len();
                let mut rm = self
                    .model
                    .buffer(&mean_key)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros([1, c, 1, 1]));
                let mut rv = self
                    .model
                    .buffer(&var_key)
                    .cloned()
                    .unwrap_or_else(|| Tensor::full([1, c, 1, 1], T::one()));
                for ch in 0..c {
                    let m = &mut rm.data_mut()[ch];
                    *m = keep * *m + take * moments.mean[ch];
                    let v = &mut rv.data_mut()[ch];
                    *v = keep * *v + take * moments.var[ch] * correction;
                }
                self.model.set_buffer(mean_key, rm);
                self.model.set_buffer(var_key, rv);
                Ok(out)
            }
            Mode::Eval => {
                let mean = self
                    .model
                    .buffer(&mean_key)
                    .ok_or_else(|| Error::Config(format!("missing buffer {mean_key}")))?
                    .data()
                    .to_vec();
                let var = self
                    .model
                    .buffer(&var_key)
                    .ok_or_else(|| Error::Config(format!("missing buffer {var_key}")))?
                    .data()
                    .to_vec();
                let (out, _) =
                    self.tape
                        .batch_norm(x, gamma, beta, BnStats::Running { mean: &mean, var: &var })?;
                Ok(out)
            }
        }
    }

    /// Runs backward from `loss` and stores each bound parameter's gradient
    /// in the model. Parameters that were never bound get no gradient.
    pub fn backward(mut self, loss: Var) -> Result<T> {
        let loss_value = self.tape.value(loss)?.data()[0];
        let mut grads = self.tape.backward(loss)?;
        for (name, var) in &self.bound {
            let p = self.model.get_mut(name).expect("bound parameters exist");
            let g = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            p.grad = Some(g);
        }
        Ok(loss_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut m = ModelParams::<f32>::new();
        m.add_scale("alpha").unwrap();
        assert!(m.add_scale("alpha").is_err());
    }

    #[test]
    fn scale_must_be_scalar() {
        let mut m = ModelParams::<f32>::new();
        assert!(m.add("s", ParamKind::ScaleScalar, Tensor::zeros([1, 2, 1, 1])).is_err());
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut m = ModelParams::<f64>::new();
        m.add_bn("bn", 1).unwrap();
        let x = Tensor::from_f64([1, 1, 1, 2], &[1.0, 3.0]).unwrap();
        let mut g = Graph::new(&mut m, Mode::Train);
        let xv = g.input(x);
        g.bn(xv, "bn").unwrap();
        drop(g);
        // mean 2, unbiased var 2
        assert!((m.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((m.buffer("bn.running_var").unwrap().data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn shared_binding_accumulates() {
        let mut m = ModelParams::<f64>::new();
        m.add("w", ParamKind::ConvKernel, Tensor::from_f64([1, 1, 1, 1], &[3.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(&mut m, Mode::Train);
        let x = g.input(Tensor::from_f64([1, 1, 1, 1], &[2.0]).unwrap());
        let a = g.conv(x, "w", 1, 0).unwrap();
        let b = g.conv(a, "w", 1, 0).unwrap(); // w² x
        let loss = g.tape.sum(b).unwrap();
        g.backward(loss).unwrap();
        // d(w² x)/dw = 2 w x = 12
        assert_eq!(m.get("w").unwrap().grad.as_ref().unwrap().data()[0], 12.0);
    }

    #[test]
    fn conv_init_is_seeded() {
        let build = || {
            let mut m = ModelParams::<f32>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            m.add_conv("w", [4, 2, 3, 3], 18, &mut rng).unwrap();
            m
        };
        assert_eq!(build().get("w").unwrap().value, build().get("w").unwrap().value);
    }
}
