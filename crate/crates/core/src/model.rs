//! Shared backbone plus per-client linear heads.
//!
//! The backbone maps an input to a feature vector of length `M`; client `i`
//! owns a bias-free `K_i x M` head whose product with the features gives the
//! class logits. Client losses are mean softmax cross-entropies and the
//! global loss weights them by each client's share of the training data.
//!
//! Every full backbone evaluation made on behalf of a client is recorded in a
//! [`PassCounter`]. Head-only work can reuse a [`FeatureCache`], which is
//! tied to the [`Theta`] version it was computed from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{proportionality_weights, Batch, ClientDataset, ClientId};
use crate::error::{config, input, Error, Result};
use crate::nn::{
    add_transposed_matmul, backward_trace, forward_features, forward_trace, init_params, matmul,
    matmul_transposed, param_layout, softmax_cross_entropy, validate_specs, LayerSpec, Matrix,
    ParamVector, Segment,
};
use crate::rng::{substream, Stream};

/// The shared layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    specs: Vec<LayerSpec>,
}

impl Backbone {
    pub fn new(specs: Vec<LayerSpec>) -> Result<Self> {
        validate_specs(&specs)?;
        Ok(Self { specs })
    }

    /// ReLU layers of the given widths on top of `input_dim` inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.is_empty() {
            return Err(config("backbone needs at least one hidden layer"));
        }
        let mut specs = Vec::with_capacity(hidden.len());
        let mut prev = input_dim;
        for &h in hidden {
            specs.push(LayerSpec::relu(prev, h));
            prev = h;
        }
        Self::new(specs)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.specs.last().unwrap().out_dim
    }

    pub fn layout(&self) -> Vec<Segment> {
        param_layout(&self.specs)
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamVector> {
        init_params(&self.specs, rng)
    }

    /// The same backbone followed by a bias-free linear layer with `outputs`
    /// units, i.e. a single network whose output is the logits.
    pub fn with_linear_head(&self, outputs: usize) -> Result<Backbone> {
        let mut specs = self.specs.clone();
        specs.push(LayerSpec::new(
            self.feature_dim(),
            outputs,
            crate::nn::Activation::Identity,
            false,
        ));
        Backbone::new(specs)
    }

    pub fn features(
        &self,
        theta: &ParamVector,
        inputs: &Matrix,
        passes: &mut PassCounter,
    ) -> Result<Matrix> {
        passes.record();
        forward_features(theta, &self.specs, inputs)
    }
}

/// Shared parameters together with a version that changes on every update.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    params: ParamVector,
    version: u64,
}

impl Theta {
    pub fn new(params: ParamVector) -> Self {
        Self { params, version: 0 }
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Installs new values and bumps the version.
    pub fn replace(&mut self, params: ParamVector) -> Result<()> {
        self.params.ensure_layout(&params, "theta update")?;
        params.ensure_finite("theta update")?;
        self.params = params;
        self.version += 1;
        Ok(())
    }
}

/// Number of full backbone evaluations performed for one client.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounter(u64);

impl PassCounter {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn record(&mut self) {
        self.0 += 1;
    }

    pub fn count(&self) -> u64 {
        self.0
    }

    pub fn reset(&mut self) {
        self.0 = 0;
    }
}

pub fn head_layout(classes: usize, feature_dim: usize) -> Vec<Segment> {
    vec![Segment::Matrix {
        rows: classes,
        cols: feature_dim,
    }]
}

/// Head for `client` with entries uniform in `[0, 1)`.
///
/// Drawn from the client's own stream, so the value does not depend on when
/// the client is first visited.
pub fn init_head(seed: u64, client: ClientId, classes: usize, feature_dim: usize) -> ParamVector {
    let mut rng: ChaCha8Rng = substream(seed, Stream::HeadInit, client as u64);
    let values = (0..classes * feature_dim)
        .map(|_| rng.random::<f64>())
        .collect();
    ParamVector::from_parts(values, head_layout(classes, feature_dim)).expect("head layout")
}

fn head_matrix(head: &ParamVector, feature_dim: usize) -> Result<Matrix> {
    match head.shapes() {
        [Segment::Matrix { cols, .. }] if *cols == feature_dim => head.segment_matrix(0),
        other => Err(config(format!(
            "head layout {other:?} is not a single K x {feature_dim} matrix"
        ))),
    }
}

fn head_loss_from_features(
    features: &Matrix,
    head: &Matrix,
    labels: &[usize],
) -> Result<(f64, Matrix)> {
    let logits = matmul_transposed(features, head);
    softmax_cross_entropy(&logits, labels)
}

/// Mean cross-entropy of one client's batch; one backbone pass.
pub fn client_loss(
    backbone: &Backbone,
    theta: &ParamVector,
    head: &ParamVector,
    batch: &Batch,
    passes: &mut PassCounter,
) -> Result<f64> {
    let w = head_matrix(head, backbone.feature_dim())?;
    batch.validate(w.rows())?;
    let phi = backbone.features(theta, &batch.inputs, passes)?;
    Ok(head_loss_from_features(&phi, &w, &batch.labels)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGradient {
    pub loss: f64,
    pub head: ParamVector,
    pub theta: ParamVector,
}

/// Loss and gradients with respect to both the head and the backbone; one
/// forward and one backward pass.
pub fn joint_gradient(
    backbone: &Backbone,
    theta: &ParamVector,
    head: &ParamVector,
    batch: &Batch,
    passes: &mut PassCounter,
) -> Result<JointGradient> {
    let w = head_matrix(head, backbone.feature_dim())?;
    batch.validate(w.rows())?;
    passes.record();
    let trace = forward_trace(theta, backbone.specs(), &batch.inputs)?;
    let phi = trace.output();
    let (loss, dlogits) = head_loss_from_features(phi, &w, &batch.labels)?;
    let mut grad_head = head.zeros_like();
    add_transposed_matmul(&dlogits, phi, grad_head.values_mut());
    let dphi = matmul(&dlogits, &w);
    let grad_theta = backward_trace(theta, backbone.specs(), &trace, &dphi)?;
    grad_head.ensure_finite("head gradient")?;
    grad_theta.ensure_finite("backbone gradient")?;
    Ok(JointGradient {
        loss,
        head: grad_head,
        theta: grad_theta,
    })
}

/// Backbone features of one client's training inputs, valid for a single
/// [`Theta`] version.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    pub client: ClientId,
    pub features: Matrix,
    pub theta_version: u64,
}

impl FeatureCache {
    /// One backbone pass.
    pub fn build(
        backbone: &Backbone,
        theta: &Theta,
        client: ClientId,
        inputs: &Matrix,
        passes: &mut PassCounter,
    ) -> Result<Self> {
        Ok(Self {
            client,
            features: backbone.features(theta.params(), inputs, passes)?,
            theta_version: theta.version(),
        })
    }

    fn check_fresh(&self, theta: &Theta) -> Result<()> {
        if self.theta_version != theta.version() {
            return Err(Error::State(format!(
                "feature cache for client {} was built at theta version {}, current is {}",
                self.client,
                self.theta_version,
                theta.version()
            )));
        }
        Ok(())
    }

    /// Head loss and head gradient from cached features; no backbone pass.
    pub fn head_loss_and_gradient(
        &self,
        theta: &Theta,
        head: &ParamVector,
        labels: &[usize],
    ) -> Result<(f64, ParamVector)> {
        self.check_fresh(theta)?;
        let w = head_matrix(head, self.features.cols())?;
        if labels.len() != self.features.rows() {
            return Err(input(format!(
                "{} labels for {} cached feature rows",
                labels.len(),
                self.features.rows()
            )));
        }
        let (loss, dlogits) = head_loss_from_features(&self.features, &w, labels)?;
        let mut grad = head.zeros_like();
        add_transposed_matmul(&dlogits, &self.features, grad.values_mut());
        grad.ensure_finite("head gradient")?;
        Ok((loss, grad))
    }
}

/// Head gradient computed from cached features.
pub fn head_gradient_cached(
    cache: &FeatureCache,
    theta: &Theta,
    head: &ParamVector,
    labels: &[usize],
) -> Result<ParamVector> {
    cache
        .head_loss_and_gradient(theta, head, labels)
        .map(|(_, g)| g)
}

/// `Σ_i α_i ℓ_i` with `α_i = N_i / Σ_j N_j` over `datasets`.
pub fn global_loss(
    backbone: &Backbone,
    theta: &ParamVector,
    heads: &BTreeMap<ClientId, ParamVector>,
    datasets: &[ClientDataset],
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(input("global loss over an empty federation"));
    }
    let sizes: Vec<usize> = datasets.iter().map(ClientDataset::num_train).collect();
    let alphas = proportionality_weights(&sizes)?;
    let mut total = 0.0;
    let mut passes = PassCounter::new();
    for (d, a) in datasets.iter().zip(alphas) {
        let head = heads
            .get(&d.client_id)
            .ok_or_else(|| input(format!("client {} has no head", d.client_id)))?;
        total += a * client_loss(backbone, theta, head, &d.train, &mut passes)?;
    }
    Ok(total)
}

/// Shared parameters, client heads and the backbone they run on.
#[derive(Debug, Clone)]
pub struct PersonalizedModel {
    pub backbone: Backbone,
    pub theta: Theta,
    pub heads: BTreeMap<ClientId, ParamVector>,
    head_seed: u64,
}

impl PersonalizedModel {
    /// Fresh model: Glorot backbone from the seed's backbone stream, no heads.
    pub fn new(backbone: Backbone, seed: u64) -> Result<Self> {
        let theta = backbone.init_params(&mut substream(seed, Stream::BackboneInit, 0))?;
        Ok(Self::from_parts(backbone, theta, BTreeMap::new(), seed))
    }

    pub fn from_parts(
        backbone: Backbone,
        theta: ParamVector,
        heads: BTreeMap<ClientId, ParamVector>,
        head_seed: u64,
    ) -> Self {
        Self {
            backbone,
            theta: Theta::new(theta),
            heads,
            head_seed,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// The client's head, created on first access.
    pub fn head_mut(&mut self, client: ClientId, classes: usize) -> &mut ParamVector {
        let (seed, m) = (self.head_seed, self.feature_dim());
        self.heads
            .entry(client)
            .or_insert_with(|| init_head(seed, client, classes, m))
    }

    /// Removes and returns the client's head, creating it if it never existed.
    pub fn take_head(&mut self, client: ClientId, classes: usize) -> ParamVector {
        self.heads
            .remove(&client)
            .unwrap_or_else(|| init_head(self.head_seed, client, classes, self.feature_dim()))
    }

    pub fn ensure_heads(&mut self, datasets: &[ClientDataset]) {
        for d in datasets {
            self.head_mut(d.client_id, d.num_classes());
        }
    }

    pub fn global_loss(&self, datasets: &[ClientDataset]) -> Result<f64> {
        global_loss(&self.backbone, self.theta.params(), &self.heads, datasets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_check, softmax_rows};
    use rand::Rng;

    fn fixture(seed: u64, n: usize, classes: usize) -> (Backbone, ParamVector, ParamVector, Batch) {
        let backbone = Backbone::mlp(4, &[5, 3]).unwrap();
        let mut rng = substream(seed, Stream::Fixture, 0);
        let theta = backbone.init_params(&mut rng).unwrap();
        let mut head = ParamVector::zeros(head_layout(classes, 3));
        for v in head.values_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let inputs = Matrix::from_vec(
            n,
            4,
            (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (backbone, theta, head, Batch::new(inputs, labels).unwrap())
    }

    #[test]
    fn zero_head_gives_log_k() {
        let (backbone, theta, _, batch) = fixture(1, 8, 10);
        let head = ParamVector::zeros(head_layout(10, 3));
        let mut passes = PassCounter::new();
        let loss = client_loss(&backbone, &theta, &head, &batch, &mut passes).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(passes.count(), 1);
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let backbone = Backbone::new(vec![LayerSpec::linear(2, 2)]).unwrap();
        let mut theta = ParamVector::zeros(backbone.layout());
        theta.segment_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let head = ParamVector::from_parts(vec![0.0, 0.0, 50.0, 0.0], head_layout(2, 2)).unwrap();
        let batch = Batch::new(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(), vec![1]).unwrap();
        let loss = client_loss(&backbone, &theta, &head, &batch, &mut PassCounter::new()).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn client_loss_matches_per_sample_loop() {
        let (backbone, theta, head, batch) = fixture(2, 20, 4);
        let got = client_loss(&backbone, &theta, &head, &batch, &mut PassCounter::new()).unwrap();
        let w = head.segment_matrix(0).unwrap();
        let mut sum = 0.0;
        for j in 0..batch.len() {
            let x = Matrix::from_vec(1, 4, batch.inputs.row(j).to_vec()).unwrap();
            let phi = forward_features(&theta, backbone.specs(), &x).unwrap();
            let logits: Vec<f64> = (0..4)
                .map(|k| (0..3).map(|m| w.get(k, m) * phi.get(0, m)).sum())
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            sum += -(logits[batch.labels[j]].exp() / z).ln();
        }
        assert!((got - sum / 20.0).abs() < 1e-13);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (backbone, theta, head, batch) = fixture(3, 20, 3);
        let g = joint_gradient(&backbone, &theta, &head, &batch, &mut PassCounter::new()).unwrap();
        let f_theta = |p: &ParamVector| {
            client_loss(&backbone, p, &head, &batch, &mut PassCounter::new()).unwrap()
        };
        let f_head = |h: &ParamVector| {
            client_loss(&backbone, &theta, h, &batch, &mut PassCounter::new()).unwrap()
        };
        assert!(finite_difference_check(f_theta, &theta, &g.theta, 1e-5) < 1e-6);
        assert!(finite_difference_check(f_head, &head, &g.head, 1e-5) < 1e-6);
    }

    #[test]
    fn head_gradient_is_softmax_minus_onehot_times_features() {
        let (backbone, theta, head, batch) = fixture(4, 10, 3);
        let g = joint_gradient(&backbone, &theta, &head, &batch, &mut PassCounter::new()).unwrap();
        let phi = forward_features(&theta, backbone.specs(), &batch.inputs).unwrap();
        let p = softmax_rows(&matmul_transposed(&phi, &head.segment_matrix(0).unwrap()));
        for k in 0..3 {
            for m in 0..3 {
                let want: f64 = (0..10)
                    .map(|j| {
                        (p.get(j, k) - f64::from(u8::from(batch.labels[j] == k))) * phi.get(j, m)
                    })
                    .sum::<f64>()
                    / 10.0;
                assert!((g.head.values()[k * 3 + m] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn saturated_predictions_have_vanishing_gradients() {
        let backbone = Backbone::new(vec![LayerSpec::linear(2, 2)]).unwrap();
        let mut theta = ParamVector::zeros(backbone.layout());
        theta.segment_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let head = ParamVector::from_parts(vec![60.0, 0.0, 0.0, 60.0], head_layout(2, 2)).unwrap();
        let inputs = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Batch::new(inputs, vec![0, 1]).unwrap();
        let g = joint_gradient(&backbone, &theta, &head, &batch, &mut PassCounter::new()).unwrap();
        assert!(g.head.norm() < 1e-8);
        assert!(g.theta.norm() < 1e-8);
    }

    #[test]
    fn cached_head_gradient_matches_joint_and_costs_no_pass() {
        let (backbone, theta, head, batch) = fixture(5, 12, 4);
        let theta = Theta::new(theta);
        let mut passes = PassCounter::new();
        let cache = FeatureCache::build(&backbone, &theta, 0, &batch.inputs, &mut passes).unwrap();
        assert_eq!(passes.count(), 1);
        let cached = head_gradient_cached(&cache, &theta, &head, &batch.labels).unwrap();
        assert_eq!(passes.count(), 1);
        let joint = joint_gradient(
            &backbone,
            theta.params(),
            &head,
            &batch,
            &mut PassCounter::new(),
        )
        .unwrap();
        assert!(cached.max_abs_diff(&joint.head).unwrap() < 1e-12);

        // zero head: gradient is (1/K - onehot)ᵀ φ / N
        let zero = ParamVector::zeros(head_layout(4, 3));
        let g = head_gradient_cached(&cache, &theta, &zero, &batch.labels).unwrap();
        for k in 0..4 {
            for m in 0..3 {
                let want: f64 = (0..12)
                    .map(|j| {
                        (0.25 - f64::from(u8::from(batch.labels[j] == k)))
                            * cache.features.get(j, m)
                    })
                    .sum::<f64>()
                    / 12.0;
                assert!((g.values()[k * 3 + m] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn stale_cache_is_a_state_error() {
        let (backbone, theta, head, batch) = fixture(6, 5, 2);
        let mut theta = Theta::new(theta);
        let cache =
            FeatureCache::build(&backbone, &theta, 0, &batch.inputs, &mut PassCounter::new())
                .unwrap();
        let mut moved = theta.params().clone();
        moved.values_mut()[0] += 0.1;
        theta.replace(moved).unwrap();
        assert!(matches!(
            head_gradient_cached(&cache, &theta, &head, &batch.labels),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn heads_are_uniform_unit_interval_and_order_independent() {
        let a = init_head(9, 3, 2, 50);
        let b = init_head(9, 3, 2, 50);
        assert_eq!(a, b);
        assert!(a.values().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_ne!(a, init_head(9, 4, 2, 50));
    }
}
