//! Few-shot classifier architectures.
//!
//! `conv4` is the standard 4-block embedding network (3x3 convolutions,
//! batch norm, ReLU, 2x2 max-pool per block, then a dense head).
//! `conv_small` is a 2-block, 8-filter variant sized for 14x14 inputs
//! so that second-order meta-gradients stay cheap; `mlp` exists for
//! fast tests. Softmax lives in the loss, not the model, so logits are
//! directly reusable for accuracy computation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Conv4,
    ConvSmall,
    Mlp,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Conv4 => "conv4",
            ModelKind::ConvSmall => "conv_small",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conv4" => Ok(ModelKind::Conv4),
            "conv_small" => Ok(ModelKind::ConvSmall),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(CoreError::InvalidSpec(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input as [C, H, W].
    pub input_shape: [usize; 3],
    pub n_classes: usize,
    /// Per-block filter count for the conv kinds.
    pub filters: usize,
    /// Hidden widths for the MLP kind.
    pub hidden: Vec<usize>,
}

impl ModelSpec {
    pub fn conv4(input_shape: [usize; 3], n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Conv4,
            input_shape,
            n_classes,
            filters: 64,
            hidden: Vec::new(),
        }
    }

    pub fn conv_small(input_shape: [usize; 3], n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::ConvSmall,
            input_shape,
            n_classes,
            filters: 8,
            hidden: Vec::new(),
        }
    }

    pub fn mlp(input_shape: [usize; 3], n_classes: usize, hidden: Vec<usize>) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape,
            n_classes,
            filters: 0,
            hidden,
        }
    }

    pub fn n_blocks(&self) -> usize {
        match self.kind {
            ModelKind::Conv4 => 4,
            ModelKind::ConvSmall => 2,
            ModelKind::Mlp => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(CoreError::InvalidSpec("n_classes must be >= 2".to_string()));
        }
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(CoreError::InvalidSpec("input extents must be positive".to_string()));
        }
        match self.kind {
            ModelKind::Mlp => Ok(()),
            _ => {
                if self.filters == 0 {
                    return Err(CoreError::InvalidSpec("filters must be positive".to_string()));
                }
                // Each block halves H and W (rounding up); the input
                // must survive the pooling depth.
                let min = 1usize << self.n_blocks();
                if h < min || w < min {
                    return Err(CoreError::InvalidSpec(format!(
                        "input {h}x{w} incompatible with {} pooling stages",
                        self.n_blocks()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Spatial extents after each block's pooling.
    fn pooled_hw(&self) -> (usize, usize) {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 0..self.n_blocks() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w)
    }

    /// Flattened feature size feeding the dense head.
    pub fn feature_size(&self) -> usize {
        match self.kind {
            ModelKind::Mlp => {
                let [c, h, w] = self.input_shape;
                match self.hidden.last() {
                    Some(&last) => last,
                    None => c * h * w,
                }
            }
            _ => {
                let (h, w) = self.pooled_hw();
                self.filters * h * w
            }
        }
    }
}

/// Named, ordered trainable tensors of one classifier.
#[derive(Debug, Clone)]
pub struct ParamSet {
    spec: ModelSpec,
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn from_entries(spec: ModelSpec, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != entries.len() {
            return Err(CoreError::InvalidSpec("duplicate parameter names".to_string()));
        }
        Ok(ParamSet { spec, entries })
    }

    /// Re-registers every tensor as a leaf on `graph`, preserving names
    /// and order.
    pub fn register_leaves(&self, graph: &Graph) -> ParamSet {
        ParamSet {
            spec: self.spec.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), graph.leaf(t)))
                .collect(),
        }
    }

    /// Drops any tape attachment from every tensor.
    pub fn detach(&self) -> ParamSet {
        ParamSet {
            spec: self.spec.clone(),
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.detach()))
                .collect(),
        }
    }

    /// Replaces tensors positionally, keeping names.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> ParamSet {
        debug_assert_eq!(tensors.len(), self.entries.len());
        ParamSet {
            spec: self.spec.clone(),
            entries: self
                .entries
                .iter()
                .zip(tensors)
                .map(|((n, _), t)| (n.clone(), t))
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bits_eq(bt))
    }
}

/// Gradients keyed by parameter name, aligned with the source
/// [`ParamSet`]'s order; shapes always match the parameters.
#[derive(Debug, Clone)]
pub struct GradMap {
    entries: Vec<(String, Tensor)>,
}

impl GradMap {
    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    /// Elementwise sum with another gradient map (same parameters).
    pub fn add_assign(&mut self, other: &GradMap) {
        debug_assert_eq!(self.entries.len(), other.entries.len());
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(other.entries.iter()) {
            let data: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data().iter())
                .map(|(x, y)| x + y)
                .collect();
            *a = Tensor::new(a.shape().to_vec(), data).expect("shape preserved");
        }
    }
}

/// Reverse-mode gradients of a scalar loss with respect to every
/// parameter; errors name the first unreachable parameter. With
/// `create_graph` the gradients stay differentiable.
pub fn grad(graph: &Graph, loss: &Tensor, params: &ParamSet, create_graph: bool) -> Result<GradMap> {
    let tensors = params.tensors();
    let opts = graph.grad_opt(loss, &tensors, create_graph)?;
    let mut entries = Vec::with_capacity(opts.len());
    for ((name, _), opt) in params.entries().iter().zip(opts) {
        match opt {
            Some(g) => entries.push((name.clone(), g)),
            None => {
                return Err(CoreError::UnreachableParam { name: name.clone() });
            }
        }
    }
    Ok(GradMap { entries })
}

/// Draws initial parameters: He-style truncated normal weights
/// (std = sqrt(2 / fan_in), clipped at two standard deviations), zero
/// biases and batch-norm shifts, unit batch-norm scales. Fully
/// determined by the seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut stream = Stream::new(seed, 0);
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    let weights = |shape: Vec<usize>, fan_in: usize, stream: &mut Stream| -> Tensor {
        let std = libm::sqrt(2.0 / fan_in as f64);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| stream.truncated_normal(std)).collect();
        Tensor::new(shape, data).expect("consistent shape")
    };

    match spec.kind {
        ModelKind::Mlp => {
            let [c, h, w] = spec.input_shape;
            let mut fan_in = c * h * w;
            for (i, &width) in spec.hidden.iter().enumerate() {
                entries.push((
                    format!("fc{}.weight", i + 1),
                    weights(alloc::vec![fan_in, width], fan_in, &mut stream),
                ));
                entries.push((format!("fc{}.bias", i + 1), Tensor::zeros(&[width])));
                fan_in = width;
            }
        }
        _ => {
            let mut in_ch = spec.input_shape[0];
            for b in 0..spec.n_blocks() {
                let f = spec.filters;
                entries.push((
                    format!("conv{}.weight", b + 1),
                    weights(alloc::vec![f, in_ch, 3, 3], in_ch * 9, &mut stream),
                ));
                entries.push((format!("conv{}.bias", b + 1), Tensor::zeros(&[f])));
                entries.push((format!("conv{}.gamma", b + 1), Tensor::filled(&[f], 1.0)));
                entries.push((format!("conv{}.beta", b + 1), Tensor::zeros(&[f])));
                in_ch = f;
            }
        }
    }

    let feat = spec.feature_size();
    entries.push((
        "head.weight".to_string(),
        weights(alloc::vec![feat, spec.n_classes], feat, &mut stream),
    ));
    entries.push(("head.bias".to_string(), Tensor::zeros(&[spec.n_classes])));

    ParamSet::from_entries(spec.clone(), entries)
}

/// Runs the classifier, returning logits of shape [B, n_classes].
pub fn forward(graph: &Graph, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
    let spec = params.spec();
    let shape = batch.shape();
    let [c, h, w] = spec.input_shape;
    if shape.len() != 4 || shape[1] != c || shape[2] != h || shape[3] != w {
        return Err(CoreError::ShapeMismatch {
            op: "forward",
            lhs: shape.to_vec(),
            rhs: alloc::vec![0, c, h, w],
        });
    }
    let b = shape[0];
    let need = |name: &str| -> Result<&Tensor> {
        params
            .get(name)
            .ok_or_else(|| CoreError::InvalidSpec(format!("missing parameter `{name}`")))
    };

    let mut x = batch.clone();
    match spec.kind {
        ModelKind::Mlp => {
            x = graph.reshape(&x, &[b, c * h * w])?;
            for i in 1..=spec.hidden.len() {
                let wt = need(&format!("fc{i}.weight"))?;
                let bias = need(&format!("fc{i}.bias"))?;
                x = graph.matmul(&x, wt)?;
                x = graph.add(&x, &graph.bcast_axis0(bias, b)?)?;
                x = graph.relu(&x)?;
            }
        }
        _ => {
            for blk in 1..=spec.n_blocks() {
                let wt = need(&format!("conv{blk}.weight"))?;
                let bias = need(&format!("conv{blk}.bias"))?;
                let gamma = need(&format!("conv{blk}.gamma"))?;
                let beta = need(&format!("conv{blk}.beta"))?;
                x = graph.conv2d(&x, wt)?;
                let [_, _, ch, cw] = [0, 0, x.shape()[2], x.shape()[3]];
                x = graph.add(&x, &graph.bcast_chan(bias, b, ch, cw)?)?;
                x = graph.batch_stat_norm(&x, gamma, beta, BN_EPS)?;
                x = graph.relu(&x)?;
                x = graph.maxpool2(&x)?;
            }
            let feat = spec.feature_size();
            x = graph.reshape(&x, &[b, feat])?;
        }
    }

    let wt = need("head.weight")?;
    let bias = need("head.bias")?;
    let logits = graph.matmul(&x, wt)?;
    graph.add(&logits, &graph.bcast_axis0(bias, b)?)
}

/// `params - lr * grads`, as plain values (no tape).
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> ParamSet {
    let tensors = params
        .entries()
        .iter()
        .zip(grads.entries().iter())
        .map(|((_, p), (_, g))| {
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data().iter())
                .map(|(x, dx)| x - lr * dx)
                .collect();
            Tensor::new(p.shape().to_vec(), data).expect("shape preserved")
        })
        .collect();
    params.detach().with_tensors(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::new(seed, 0);
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| s.uniform()).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let a = init_params(&spec, 9).unwrap();
        let b = init_params(&spec, 9).unwrap();
        assert!(a.bits_eq(&b));
        let c = init_params(&spec, 10).unwrap();
        assert!(!a.bits_eq(&c));
    }

    /// Closed-form parameter count for conv4 on 1x28x28, N=5: four
    /// blocks of (3*3*C_in*64 conv weights + 64 bias + 2*64 norm), then
    /// the dense head on the 64*2*2 pooled features.
    #[test]
    fn conv4_parameter_count_matches_layer_arithmetic() {
        let spec = ModelSpec::conv4([1, 28, 28], 5);
        let params = init_params(&spec, 1).unwrap();
        let mut want = 0usize;
        let mut c_in = 1;
        for _ in 0..4 {
            want += 3 * 3 * c_in * 64 + 64 + 2 * 64;
            c_in = 64;
        }
        // 28 -> 14 -> 7 -> 4 -> 2 under ceil-halving pooling.
        want += 64 * 2 * 2 * 5 + 5;
        assert_eq!(params.param_count(), want);
        assert_eq!(want, 113_221);
    }

    #[test]
    fn norm_scales_and_shifts_initialized_to_one_and_zero() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 2).unwrap();
        for blk in 1..=2 {
            let gamma = params.get(&format!("conv{blk}.gamma")).unwrap();
            let beta = params.get(&format!("conv{blk}.beta")).unwrap();
            assert!(gamma.data().iter().all(|&v| v == 1.0));
            assert!(beta.data().iter().all(|&v| v == 0.0));
        }
        assert!(params.get("head.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incompatible_input_shape_is_rejected() {
        let spec = ModelSpec::conv4([1, 8, 8], 5);
        assert!(init_params(&spec, 1).is_err());
        let ok = ModelSpec::conv4([1, 16, 16], 5);
        assert!(init_params(&ok, 1).is_ok());
    }

    #[test]
    fn mlp_has_no_batch_coupling() {
        let spec = ModelSpec::mlp([1, 6, 6], 3, vec![8]);
        let params = init_params(&spec, 3).unwrap();
        let single = rand_batch(&[1, 1, 6, 6], 77);
        let mut doubled = single.data().to_vec();
        doubled.extend_from_slice(rand_batch(&[1, 1, 6, 6], 78).data());
        let pair = Tensor::new(vec![2, 1, 6, 6], doubled).unwrap();
        let g = Graph::new();
        let lone = forward(&g, &params, &single).unwrap();
        let both = forward(&g, &params, &pair).unwrap();
        for j in 0..3 {
            assert!((lone.data()[j] - both.data()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn zeroed_head_gives_zero_logits_and_ln_n_loss() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 4).unwrap();
        let zeroed: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(n, t)| {
                if n.starts_with("head.") {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                }
            })
            .collect();
        let params = params.with_tensors(zeroed);
        let batch = rand_batch(&[3, 1, 14, 14], 79);
        let g = Graph::new();
        let logits = forward(&g, &params, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut lab = vec![0.0; 15];
        for i in 0..3 {
            lab[i * 5 + i] = 1.0;
        }
        let labels = Tensor::new(vec![3, 5], lab).unwrap();
        let loss = g.softmax_xent(&logits, &labels).unwrap();
        assert!((loss.item() - 5.0f64.ln()).abs() < 1e-12);
    }

    /// Every parameter of a small conv instance passes the central
    /// finite-difference check.
    #[test]
    fn conv_small_gradients_match_finite_differences_for_every_parameter() {
        let spec = ModelSpec {
            kind: ModelKind::ConvSmall,
            input_shape: [1, 8, 8],
            n_classes: 3,
            filters: 4,
            hidden: Vec::new(),
        };
        let params = init_params(&spec, 5).unwrap();
        let batch = rand_batch(&[3, 1, 8, 8], 80);
        let mut lab = vec![0.0; 9];
        for i in 0..3 {
            lab[i * 3 + i] = 1.0;
        }
        let labels = Tensor::new(vec![3, 3], lab).unwrap();

        let loss_at = |p: &ParamSet| -> f64 {
            let g = Graph::new();
            let logits = forward(&g, p, &batch).unwrap();
            g.softmax_xent(&logits, &labels).unwrap().item()
        };

        let g = Graph::new();
        let leaves = params.register_leaves(&g);
        let logits = forward(&g, &leaves, &batch).unwrap();
        let loss = g.softmax_xent(&logits, &labels).unwrap();
        let grads = grad(&g, &loss, &leaves, false).unwrap();

        let h = 1e-6;
        for (pi, (name, tensor)) in params.entries().iter().enumerate() {
            for e in 0..tensor.numel() {
                let bump = |delta: f64| -> f64 {
                    let tensors: Vec<Tensor> = params
                        .entries()
                        .iter()
                        .enumerate()
                        .map(|(i, (_, t))| {
                            if i == pi {
                                let mut d = t.data().to_vec();
                                d[e] += delta;
                                Tensor::new(t.shape().to_vec(), d).unwrap()
                            } else {
                                t.clone()
                            }
                        })
                        .collect();
                    loss_at(&params.with_tensors(tensors))
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grads.get(name).unwrap().data()[e];
                // Structural zeros (conv bias under transductive norm)
                // leave both sides at float-noise level.
                if fd.abs() < 1e-8 && an.abs() < 1e-8 {
                    continue;
                }
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{e}]: fd {fd} vs {an}"
                );
            }
        }
    }

    /// Permuting class indices and the head's class axis accordingly
    /// permutes logits identically.
    #[test]
    fn label_symmetry_of_the_head() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 6).unwrap();
        let batch = rand_batch(&[2, 1, 14, 14], 81);
        let perm = [2usize, 0, 4, 1, 3];

        let permuted: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|(n, t)| match n.as_str() {
                "head.weight" => {
                    let feat = t.shape()[0];
                    let mut d = vec![0.0; t.numel()];
                    for r in 0..feat {
                        for j in 0..5 {
                            d[r * 5 + perm[j]] = t.data()[r * 5 + j];
                        }
                    }
                    Tensor::new(t.shape().to_vec(), d).unwrap()
                }
                "head.bias" => {
                    let mut d = vec![0.0; 5];
                    for j in 0..5 {
                        d[perm[j]] = t.data()[j];
                    }
                    Tensor::new(vec![5], d).unwrap()
                }
                _ => t.clone(),
            })
            .collect();
        let pparams = params.with_tensors(permuted);

        let g = Graph::new();
        let base = forward(&g, &params, &batch).unwrap();
        let swapped = forward(&g, &pparams, &batch).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                let want = base.data()[i * 5 + j];
                let got = swapped.data()[i * 5 + perm[j]];
                assert!((want - got).abs() < 1e-15);
            }
        }
    }

    /// Conv output depends on every input pixel.
    #[test]
    fn every_pixel_reaches_some_logit() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 7).unwrap();
        let base = rand_batch(&[1, 1, 14, 14], 82);
        let g = Graph::new();
        let base_logits = forward(&g, &params, &base).unwrap();
        for p in 0..14 * 14 {
            let mut d = base.data().to_vec();
            d[p] += 1.0;
            let bumped = Tensor::new(vec![1, 1, 14, 14], d).unwrap();
            let logits = forward(&g, &params, &bumped).unwrap();
            let moved = logits
                .data()
                .iter()
                .zip(base_logits.data())
                .any(|(a, b)| (a - b).abs() > 1e-9);
            assert!(moved, "pixel {p} does not affect any logit");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::conv_small([1, 14, 14], 5);
        let params = init_params(&spec, 8).unwrap();
        let batch = rand_batch(&[4, 1, 14, 14], 83);
        let g = Graph::new();
        let a = forward(&g, &params, &batch).unwrap();
        let b = forward(&Graph::new(), &params, &batch).unwrap();
        assert!(a.bits_eq(&b));
    }
}
