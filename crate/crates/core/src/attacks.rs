//! Adversarial example generation under an l-infinity budget.
//!
//! FGSM takes a single signed-gradient step of size epsilon; PGD iterates
//! smaller signed steps, re-projecting onto the epsilon ball around the
//! original input after every step. Both clip to the valid pixel range and
//! return detached tensors: gradients taken later through the perturbed
//! images treat them as constant data.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::models::{loss_value, ModelSpec, ParamSet, StatsMode};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l-infinity radius in pixel units.
    pub epsilon: f64,
    /// PGD iteration count.
    pub steps: usize,
    /// PGD per-iteration step size; `None` selects 2.5 * epsilon / steps.
    pub step_size: Option<f64>,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: None,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon,
            steps,
            step_size: None,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = Some(step_size);
        self
    }

    pub fn resolved_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(crate::Error::InvalidConfig(format!(
                "attack epsilon {} outside [0,1]",
                self.epsilon
            )));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps < 1 {
                return Err(crate::Error::InvalidConfig("pgd needs steps >= 1".into()));
            }
            if self.resolved_step_size() <= 0.0 && self.epsilon > 0.0 {
                return Err(crate::Error::InvalidConfig(
                    "pgd step size must be > 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Run the configured attack against a classifier.
    pub fn perturb_model(
        &self,
        spec: &ModelSpec,
        params: &ParamSet,
        images: &Tensor,
        labels: &Tensor,
    ) -> Result<Tensor> {
        match self.kind {
            AttackKind::Fgsm => fgsm(spec, params, images, labels, self),
            AttackKind::Pgd => pgd(spec, params, images, labels, self),
        }
    }
}

/// Scalar loss as a function of the image node, with everything else closed
/// over. Lets the attacks run against any differentiable model.
pub trait AttackTarget {
    fn build_loss(&self, graph: &mut Graph, images: NodeId) -> Result<NodeId>;
}

/// The standard target: a classifier's batch loss with fixed parameters.
/// Batch statistics are used for normalization layers; running buffers are
/// never touched by attack generation.
pub struct ModelTarget<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ParamSet,
    pub labels: &'a Tensor,
}

impl AttackTarget for ModelTarget<'_> {
    fn build_loss(&self, graph: &mut Graph, images: NodeId) -> Result<NodeId> {
        let ids: Vec<NodeId> = self
            .params
            .tensors()
            .map(|t| graph.constant(t.clone()))
            .collect();
        let labels = graph.constant(self.labels.clone());
        crate::models::forward_loss(graph, self.spec, &ids, images, labels, StatsMode::Batch)
    }
}

/// d(loss)/d(images) at the given images, on a throwaway graph.
fn input_gradient(target: &impl AttackTarget, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), true);
    let loss = target.build_loss(&mut g, x)?;
    let grads = g.backward(loss)?;
    Ok(g.grad_or_zeros(&grads, x))
}

fn signed_step(images: &Tensor, grad: &Tensor, magnitude: f64) -> Tensor {
    images
        .zip_map(grad, |x, g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            x + magnitude * s
        })
        .expect("image/gradient shapes match")
}

/// x' = clip(x + eps * sign(grad_x loss), clip_min, clip_max)
pub fn fgsm_target(
    target: &impl AttackTarget,
    images: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let grad = input_gradient(target, images)?;
    let stepped = signed_step(images, &grad, cfg.epsilon);
    Ok(stepped.map(|v| v.clamp(cfg.clip_min, cfg.clip_max)))
}

/// Iterated signed steps from the input itself (no random start), projected
/// after every step onto the epsilon ball around the original images and then
/// onto the pixel range.
pub fn pgd_target(
    target: &impl AttackTarget,
    images: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let step = cfg.resolved_step_size();
    let mut current = images.clone();
    for _ in 0..cfg.steps {
        let grad = input_gradient(target, &current)?;
        let stepped = signed_step(&current, &grad, step);
        // Project onto the ball, then the range; both are box projections.
        current = stepped
            .zip_map(images, |v, x0| v.clamp(x0 - cfg.epsilon, x0 + cfg.epsilon))?
            .map(|v| v.clamp(cfg.clip_min, cfg.clip_max));
    }
    Ok(current)
}

pub fn fgsm(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    fgsm_target(
        &ModelTarget {
            spec,
            params,
            labels,
        },
        images,
        cfg,
    )
}

pub fn pgd(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &Tensor,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    pgd_target(
        &ModelTarget {
            spec,
            params,
            labels,
        },
        images,
        cfg,
    )
}

/// Loss on attacked inputs without training on them.
pub fn adversarial_eval_loss(
    spec: &ModelSpec,
    params: &ParamSet,
    images: &Tensor,
    labels: &Tensor,
    cfg: &AttackConfig,
) -> Result<f64> {
    let adv = cfg.perturb_model(spec, params, images, labels)?;
    loss_value(spec, params, &adv, labels, StatsMode::Batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_params, Arch};

    /// loss = sum(w . x) over a 1-sample "model" with fixed weights.
    struct DotTarget {
        w: Tensor,
    }

    impl AttackTarget for DotTarget {
        fn build_loss(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
            let w = g.constant(self.w.clone());
            let prod = g.mul(images, w)?;
            g.sum(prod)
        }
    }

    /// loss = (x - c)^2 in one dimension.
    struct QuadTarget {
        c: f64,
    }

    impl AttackTarget for QuadTarget {
        fn build_loss(&self, g: &mut Graph, images: NodeId) -> Result<NodeId> {
            let c = g.constant(Tensor::vector(&[self.c]));
            let d = g.sub(images, c)?;
            let sq = g.mul(d, d)?;
            g.sum(sq)
        }
    }

    fn mnist_fixture() -> (ModelSpec, ParamSet, Tensor, Tensor) {
        let spec = ModelSpec::new(Arch::MnistMlp, 17);
        let params = init_params(&spec);
        let images = Tensor::from_fn(&[2, 1, 28, 28], |i| ((i * 31) % 97) as f64 / 97.0);
        let labels = Tensor::from_fn(&[2, 10], |i| if i % 10 == 5 { 1.0 } else { 0.0 });
        (spec, params, images, labels)
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let (spec, params, images, labels) = mnist_fixture();
        let cfg = AttackConfig::fgsm(0.0);
        let adv = fgsm(&spec, &params, &images, &labels, &cfg).unwrap();
        assert!(adv.bit_eq(&images));
        let cfg = AttackConfig::pgd(0.0, 3).with_step_size(0.0);
        let adv = pgd(&spec, &params, &images, &labels, &cfg).unwrap();
        assert!(adv.bit_eq(&images));
    }

    #[test]
    fn linear_loss_moves_along_weight_signs() {
        // loss = 2*x0 - 3*x1: the gradient is (2, -3), so FGSM adds
        // eps * (1, -1) for interior points.
        let target = DotTarget {
            w: Tensor::vector(&[2.0, -3.0]),
        };
        let x = Tensor::vector(&[0.5, 0.5]);
        let eps = 0.1;
        let adv = fgsm_target(&target, &x, &AttackConfig::fgsm(eps)).unwrap();
        assert!((adv.data()[0] - 0.6).abs() < 1e-15);
        assert!((adv.data()[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pgd_single_full_step_equals_fgsm_bitwise() {
        let (spec, params, images, labels) = mnist_fixture();
        let eps = 0.07;
        let f = fgsm(&spec, &params, &images, &labels, &AttackConfig::fgsm(eps)).unwrap();
        let p = pgd(
            &spec,
            &params,
            &images,
            &labels,
            &AttackConfig::pgd(eps, 1).with_step_size(eps),
        )
        .unwrap();
        assert!(f.bit_eq(&p));
    }

    #[test]
    fn pgd_marches_until_projection_binds() {
        // Hand-iterated recurrence: loss (x - c)^2 with c above x, so the
        // gradient sign is -1 and each step subtracts step_size until the
        // ball boundary x0 - eps binds.
        let target = QuadTarget { c: 0.9 };
        let x0 = 0.5;
        let step = 0.03;
        let eps = 0.2;
        let steps = 10;
        let cfg = AttackConfig::pgd(eps, steps).with_step_size(step);
        let adv = pgd_target(&target, &Tensor::vector(&[x0]), &cfg).unwrap();

        let mut expect = x0;
        for _ in 0..steps {
            expect -= step; // sign(grad) = sign(2(x-c)) = -1 while x < c
            expect = expect.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
        }
        assert!(
            (expect - (x0 - eps)).abs() < 1e-15,
            "projection should bind in this setup"
        );
        assert!((adv.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn ball_and_range_invariants_hold() {
        let (spec, params, images, labels) = mnist_fixture();
        for eps in [0.05, 0.1, 0.3] {
            for cfg in [AttackConfig::fgsm(eps), AttackConfig::pgd(eps, 4)] {
                let adv = cfg.perturb_model(&spec, &params, &images, &labels).unwrap();
                let linf = adv.max_abs_diff(&images);
                assert!(linf <= eps + 1e-12, "kind {:?} linf {linf}", cfg.kind);
                assert!(adv.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn attacks_are_deterministic_and_leave_params_alone() {
        let (spec, params, images, labels) = mnist_fixture();
        let snapshot = params.clone();
        let cfg = AttackConfig::pgd(0.1, 5);
        let a = pgd(&spec, &params, &images, &labels, &cfg).unwrap();
        let b = pgd(&spec, &params, &images, &labels, &cfg).unwrap();
        assert!(a.bit_eq(&b));
        assert!(params.bit_eq(&snapshot));
    }

    #[test]
    fn later_param_gradients_treat_adversarial_images_as_constants() {
        // Insert x' as a leaf, take the loss, and check gradients exist for
        // parameters while the images collect nothing.
        let (spec, params, images, labels) = mnist_fixture();
        let adv = fgsm(&spec, &params, &images, &labels, &AttackConfig::fgsm(0.1)).unwrap();
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.tensors().map(|t| g.leaf(t.clone(), true)).collect();
        let x = g.constant(adv);
        let y = g.constant(labels.clone());
        let loss =
            crate::models::forward_loss(&mut g, &spec, &ids, x, y, StatsMode::Batch).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(ids.iter().all(|&id| grads.get(id).is_some()));
    }
}
