//! Feed-forward networks with hand-written backpropagation and Adam.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::datasets::{load_dump, save_dump, DumpDtype, Manifest};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tensor, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative at pre-activation `x` whose activation value is `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`.
    pub weights: Tensor,
    /// `[out]`.
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn new(input: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = (0..input * output)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weights: Tensor::new(vec![input, output], w).expect("in*out buffer"),
            bias: Tensor::zeros(&[output]),
            activation,
        }
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let (_, out) = weights.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "DenseLayer",
                expected: vec![out],
                actual: bias.shape().to_vec(),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    fn pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = x.matmul(&self.weights)?;
        let out = self.output_dim();
        let b = self.bias.data();
        for row in z.data_mut().chunks_exact_mut(out) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Activations recorded by [`Mlp::forward`] for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each layer.
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<LayerGradients>,
    pub input: Tensor,
}

impl MlpGradients {
    /// Parameter gradients in the order of [`Mlp::params`].
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|g| [&g.weights, &g.bias])
            .collect()
    }
}

impl Mlp {
    /// `sizes` lists every width from input to output; one activation per layer.
    pub fn new(sizes: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::invalid(format!(
                "need at least two sizes and one activation per layer, got {} sizes and {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::new(w[0], w[1], act, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::invalid(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weights, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weights, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, w) = x.dims2()?;
        if w != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                expected: vec![x.rows(), self.input_dim()],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Forward pass without recording a cache.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let act = layer.activation;
            h = layer.pre_activation(&h)?.map(|v| act.apply(v));
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&h)?;
            let act = layer.activation;
            let y = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        let cache = ForwardCache {
            inputs,
            pre,
            output: h.clone(),
        };
        Ok((h, cache))
    }

    /// Gradients of a scalar objective given `grad_out = ∂L/∂y`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Tensor) -> Result<MlpGradients> {
        let stale = cache.pre.len() != self.layers.len()
            || cache
                .pre
                .iter()
                .zip(&self.layers)
                .any(|(z, l)| z.cols() != l.output_dim())
            || cache.inputs.first().map(|x| x.cols()) != Some(self.input_dim());
        if stale {
            return Err(Error::invalid(
                "forward cache does not belong to this network",
            ));
        }
        grad_out.expect_same_shape(&cache.output, "mlp backward")?;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre[l];
            let y = if l + 1 < self.layers.len() {
                &cache.inputs[l + 1]
            } else {
                &cache.output
            };
            let act = layer.activation;
            if act != Activation::Identity {
                for ((gv, &zv), &yv) in g.data_mut().iter_mut().zip(z.data()).zip(y.data()) {
                    *gv *= act.derivative(zv, yv);
                }
            }
            let dw = cache.inputs[l].matmul_t(Trans::Yes, &g, Trans::No)?;
            let db = Tensor::vector(
                g.column_means()
                    .into_iter()
                    .map(|m| m * g.rows() as f64)
                    .collect(),
            );
            let dx = g.matmul_t(Trans::No, &layer.weights, Trans::Yes)?;
            grads.push(LayerGradients {
                weights: dw,
                bias: db,
            });
            g = dx;
        }
        grads.reverse();
        Ok(MlpGradients {
            layers: grads,
            input: g,
        })
    }

    /// Writes one tensor dump per parameter into `dir` and records the layer
    /// layout under `prefix.*` keys of `manifest`.
    pub fn save(&self, dir: &Path, prefix: &str, manifest: &mut Manifest) -> Result<()> {
        manifest.set(format!("{prefix}.layers"), self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            manifest.set(
                format!("{prefix}.layer{i}"),
                format!(
                    "{},{},{}",
                    layer.input_dim(),
                    layer.output_dim(),
                    layer.activation
                ),
            );
            save_dump(
                &dir.join(format!("{prefix}.layer{i}.weights.vltd")),
                &layer.weights,
                DumpDtype::F64,
            )?;
            save_dump(
                &dir.join(format!("{prefix}.layer{i}.bias.vltd")),
                &layer.bias,
                DumpDtype::F64,
            )?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, prefix: &str, manifest: &Manifest) -> Result<Self> {
        let count: usize = manifest.parse(&format!("{prefix}.layers"))?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let spec = manifest.require(&format!("{prefix}.layer{i}"))?;
            let parts: Vec<&str> = spec.split(',').collect();
            let [input, output, act] = parts[..] else {
                return Err(Error::invalid(format!("bad layer spec `{spec}`")));
            };
            let input: usize = input
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad layer spec `{spec}`")))?;
            let output: usize = output
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad layer spec `{spec}`")))?;
            let weights = load_dump(&dir.join(format!("{prefix}.layer{i}.weights.vltd")))?;
            let bias = load_dump(&dir.join(format!("{prefix}.layer{i}.bias.vltd")))?;
            if weights.shape() != [input, output] {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint load",
                    expected: vec![input, output],
                    actual: weights.shape().to_vec(),
                });
            }
            layers.push(DenseLayer::from_parts(weights, bias, act.parse()?)?);
        }
        Self::from_layers(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.first).enumerate() {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    expected: m.shape().to_vec(),
                    actual: if p.shape() != m.shape() {
                        p.shape().to_vec()
                    } else {
                        g.shape().to_vec()
                    },
                });
            }
            if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter tensor {i} at element {j} ({})",
                    g.data()[j]
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(w: &[&[f64]], b: &[f64], act: Activation) -> DenseLayer {
        DenseLayer::from_parts(
            Tensor::from_rows(w).unwrap(),
            Tensor::vector(b.to_vec()),
            act,
        )
        .unwrap()
    }

    /// Sum of `c ⊙ y` as a scalar objective; its output gradient is `c`.
    fn objective(net: &Mlp, x: &Tensor, c: &Tensor) -> f64 {
        let y = net.predict(x).unwrap();
        y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn identity_layer_passes_through() {
        let net = Mlp::from_layers(vec![linear(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[0.0, 0.0],
            Activation::Identity,
        )])
        .unwrap();
        let x = Tensor::from_rows(&[[3.0, -4.0], [0.5, 2.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().0, x);
    }

    #[test]
    fn relu_layer_clips_negatives() {
        let net = Mlp::from_layers(vec![linear(
            &[&[1.0, 0.0], &[0.0, 1.0]],
            &[0.0, 0.0],
            Activation::Relu,
        )])
        .unwrap();
        let x = Tensor::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(net.predict(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_hand_computed() {
        // h = relu(x·W1 + b1), y = h·W2 + b2
        let net = Mlp::from_layers(vec![
            linear(&[&[1.0, -1.0], &[2.0, 0.5]], &[0.5, 0.0], Activation::Relu),
            linear(&[&[1.0], &[-2.0]], &[0.25], Activation::Identity),
        ])
        .unwrap();
        let x = Tensor::from_rows(&[[1.0, 1.0], [1.0, -1.0]]).unwrap();
        // row0: pre = [1+2+0.5, -1+0.5] = [3.5, -0.5] → h=[3.5, 0] → y = 3.75
        // row1: pre = [1-2+0.5, -1-0.5] = [-0.5, -1.5] → h=[0, 0] → y = 0.25
        assert_eq!(net.predict(&x).unwrap().data(), &[3.75, 0.25]);
    }

    #[test]
    fn dimension_chain_is_validated() {
        let mut rng = Rng::new(0);
        let a = DenseLayer::new(3, 4, Activation::Relu, &mut rng);
        let b = DenseLayer::new(5, 2, Activation::Relu, &mut rng);
        assert!(Mlp::from_layers(vec![a, b]).is_err());
        let net = Mlp::new(&[3, 4], &[Activation::Tanh], &mut rng).unwrap();
        assert!(net.predict(&Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn glorot_init_bounds() {
        let mut rng = Rng::new(4);
        let layer = DenseLayer::new(30, 20, Activation::Relu, &mut rng);
        let limit = (6.0_f64 / 50.0).sqrt();
        assert!(layer.weights.data().iter().all(|w| w.abs() <= limit));
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let net = Mlp::new(&[3, 5, 2], &[Activation::Tanh, Activation::Sigmoid], &mut rng).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &Tensor::zeros(&[4, 2])).unwrap();
        assert!(g.params().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.input.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_weight_gradient_is_xt_g() {
        let mut rng = Rng::new(2);
        let net = Mlp::new(&[3, 1], &[Activation::Identity], &mut rng).unwrap();
        let x = Tensor::new(vec![5, 3], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let go = Tensor::new(vec![5, 1], (0..5).map(|_| rng.normal()).collect()).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &go).unwrap();
        for j in 0..3 {
            let expect: f64 = (0..5).map(|i| x.get(i, j) * go.get(i, 0)).sum();
            assert!((g.layers[0].weights.get(j, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = Rng::new(3);
        let a = Mlp::new(&[3, 4, 2], &[Activation::Relu, Activation::Identity], &mut rng).unwrap();
        let b = Mlp::new(&[3, 2], &[Activation::Identity], &mut rng).unwrap();
        let (_, cache) = b.forward(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(a.backward(&cache, &Tensor::zeros(&[1, 2])).is_err());
        let (_, cache) = a.forward(&Tensor::zeros(&[1, 3])).unwrap();
        assert!(a.backward(&cache, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let acts = [
            Activation::Identity,
            Activation::Relu,
            Activation::Tanh,
            Activation::Sigmoid,
        ];
        let mut rng = Rng::new(77);
        for trial in 0..12 {
            let depth = 1 + trial % 3;
            let mut sizes = vec![2 + rng.below(3)];
            let mut layer_acts = Vec::new();
            for _ in 0..depth {
                sizes.push(2 + rng.below(4));
                layer_acts.push(acts[rng.below(4)]);
            }
            let mut net = Mlp::new(&sizes, &layer_acts, &mut rng).unwrap();
            for p in net.params_mut() {
                for v in p.data_mut() {
                    *v += 0.3 * rng.normal();
                }
            }
            let batch = 3;
            let x = Tensor::new(
                vec![batch, sizes[0]],
                (0..batch * sizes[0]).map(|_| rng.normal()).collect(),
            )
            .unwrap();
            let out = *sizes.last().unwrap();
            let c = Tensor::new(vec![batch, out], (0..batch * out).map(|_| rng.normal()).collect())
                .unwrap();
            let (_, cache) = net.forward(&x).unwrap();
            let grads = net.backward(&cache, &c).unwrap();
            let analytic: Vec<Vec<f64>> = grads.params().iter().map(|t| t.data().to_vec()).collect();

            let h = 1e-5;
            for (pi, an) in analytic.iter().enumerate() {
                for ei in 0..an.len() {
                    let orig = net.params()[pi].data()[ei];
                    net.params_mut()[pi].data_mut()[ei] = orig + h;
                    let up = objective(&net, &x, &c);
                    net.params_mut()[pi].data_mut()[ei] = orig - h;
                    let down = objective(&net, &x, &c);
                    net.params_mut()[pi].data_mut()[ei] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let err = (fd - an[ei]).abs() / fd.abs().max(an[ei].abs()).max(1e-6);
                    // ReLU kinks can straddle the FD stencil; skip those points.
                    let near_kink = layer_acts.contains(&Activation::Relu) && err > 1e-4
                        && cache.pre.iter().any(|z| z.data().iter().any(|v| v.abs() < 2.0 * h));
                    assert!(
                        err <= 1e-4 || near_kink,
                        "trial {trial} param {pi}[{ei}]: fd {fd} vs analytic {}",
                        an[ei]
                    );
                }
            }
            // input gradient too
            let mut xp = x.clone();
            for ei in 0..x.len() {
                let orig = xp.data()[ei];
                xp.data_mut()[ei] = orig + h;
                let up = objective(&net, &xp, &c);
                xp.data_mut()[ei] = orig - h;
                let down = objective(&net, &xp, &c);
                xp.data_mut()[ei] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.input.data()[ei];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-3));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut opt = OptimizerState::new(AdamConfig::default(), [&p]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]);
        let g = Tensor::vector(vec![0.5, -3.0, 1e3]);
        let mut opt = OptimizerState::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε)
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let expect = -0.01 * gv / (gv.abs() + 1e-8);
            assert!((pv - expect).abs() < 1e-15);
            assert!((pv.abs() - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, 0.7]);
            let mut opt = OptimizerState::new(AdamConfig::default(), [&p]);
            for k in 0..5 {
                let g = Tensor::vector(vec![k as f64 * 0.1, -0.2]);
                opt.step(&mut [&mut p], &[&g]).unwrap();
            }
            p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_and_shape_mismatch() {
        let mut p = Tensor::vector(vec![1.0, 1.0]);
        let mut opt = OptimizerState::new(AdamConfig::default(), [&p]);
        let bad = Tensor::vector(vec![0.0, f64::NAN]);
        let err = opt.step(&mut [&mut p], &[&bad]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref s) if s.contains("element 1")));
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
        let wrong = Tensor::vector(vec![0.0]);
        assert!(opt.step(&mut [&mut p], &[&wrong]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(8);
        let net = Mlp::new(&[4, 3, 2], &[Activation::Relu, Activation::Sigmoid], &mut rng).unwrap();
        let mut manifest = Manifest::default();
        net.save(dir.path(), "enc", &mut manifest).unwrap();
        let back = Mlp::load(dir.path(), "enc", &manifest).unwrap();
        assert_eq!(back, net);
    }
}
