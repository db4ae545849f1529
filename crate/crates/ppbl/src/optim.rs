//! Adam / AdamW with bias correction and a linear warmup schedule.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(Error::Config(format!("unknown optimizer kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Adam => write!(f, "adam"),
            OptimizerKind::AdamW => write!(f, "adamw"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; only applied by AdamW.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Effective learning rate under linear warmup: ramps from base/W at
/// iteration 1 to the full rate at iteration W = ceil(frac * total), then
/// stays constant. frac = 0 disables warmup.
pub fn warmup_lr(base_lr: f64, iter: u64, total_iters: u64, warmup_frac: f64) -> f64 {
    let w = (warmup_frac * total_iters as f64).ceil() as u64;
    if w == 0 || iter >= w {
        base_lr
    } else {
        base_lr * iter as f64 / w as f64
    }
}

/// First/second moment state for one parameter group.
#[derive(Debug, Clone)]
struct GroupState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// Adam/AdamW over a fixed set of parameter groups (a stage's groups for
/// a pipeline worker, all groups for the monolithic trainer).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    groups: Vec<usize>,
    state: Vec<GroupState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: AdamHyper, model: &ModelParams, groups: &[usize]) -> Self {
        let state = groups
            .iter()
            .map(|&g| GroupState {
                m: model.group(g).tensors.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
                v: model.group(g).tensors.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            })
            .collect();
        Optimizer { kind, hyper, groups: groups.to_vec(), state }
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// One update step at iteration `iter` (1-based; drives bias
    /// correction). `grads` must align with this optimizer's groups,
    /// outer by group, inner by tensor.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &[Vec<Tensor>],
        lr_eff: f64,
        iter: u64,
    ) -> Result<()> {
        if iter == 0 {
            return Err(Error::InvalidArgument("optimizer step iteration must be >= 1".into()));
        }
        if grads.len() != self.groups.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer got {} grad groups, expected {}",
                grads.len(),
                self.groups.len()
            )));
        }
        let AdamHyper { beta1, beta2, eps, weight_decay } = self.hyper;
        let bc1 = 1.0 - beta1.powi(iter as i32);
        let bc2 = 1.0 - beta2.powi(iter as i32);
        for (si, (&gi, ggrads)) in self.groups.iter().zip(grads).enumerate() {
            let group = params.group_mut(gi);
            if ggrads.len() != group.tensors.len() {
                return Err(Error::InvalidArgument(format!(
                    "grad group for layer {gi} has {} tensors, expected {}",
                    ggrads.len(),
                    group.tensors.len()
                )));
            }
            for (ti, ((_, p), g)) in group.tensors.iter_mut().zip(ggrads).enumerate() {
                if p.shape() != g.shape() {
                    return Err(Error::shape_mismatch("optimizer step", p.shape(), g.shape()));
                }
                if !g.all_finite() {
                    return Err(Error::non_finite(format!("gradient for layer {gi}")));
                }
                let st = &mut self.state[si];
                let (m, v) = (st.m[ti].data_mut(), st.v[ti].data_mut());
                let pd = p.data_mut();
                let gd = g.data();
                for i in 0..pd.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gd[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gd[i] * gd[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    let mut update = m_hat / (v_hat.sqrt() + eps);
                    if self.kind == OptimizerKind::AdamW {
                        update += weight_decay * pd[i];
                    }
                    pd[i] -= lr_eff * update;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};

    fn single_param_model() -> ModelParams {
        ModelParams::init(
            ModelConfig { vocab: 4, embed_dim: 2, prompt_len: 2, target_len: 1, blocks: 1 },
            0,
        )
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut model = single_param_model();
        let before = model.clone();
        let groups = vec![0];
        let zero: Vec<Vec<Tensor>> = vec![model
            .group(0)
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()];

        let mut adam = Optimizer::new(OptimizerKind::Adam, AdamHyper::default(), &model, &groups);
        adam.step(&mut model, &zero, 1e-3, 1).unwrap();
        assert!(model.group(0).bit_eq(before.group(0)));

        // AdamW with decay 0 is also bit-exact on zero gradient
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        let mut adamw = Optimizer::new(OptimizerKind::AdamW, hyper, &model, &groups);
        adamw.step(&mut model, &zero, 1e-3, 1).unwrap();
        assert!(model.group(0).bit_eq(before.group(0)));

        // with decay on, AdamW moves the params by exactly the decay term
        let mut adamw2 =
            Optimizer::new(OptimizerKind::AdamW, AdamHyper::default(), &model, &groups);
        adamw2.step(&mut model, &zero, 1e-3, 1).unwrap();
        assert!(!model.group(0).bit_eq(before.group(0)));
    }

    #[test]
    fn single_step_matches_hand_computed_adam() {
        let mut model = single_param_model();
        let p0 = model.group(0).tensors[0].1.data()[0];
        let g = 0.5_f64;
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);

        let mut grads: Vec<Vec<Tensor>> = vec![model
            .group(0)
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()];
        grads[0][0].data_mut()[0] = g;

        let hyper = AdamHyper { beta1, beta2, eps, weight_decay: 0.0 };
        let mut opt = Optimizer::new(OptimizerKind::Adam, hyper, &model, &[0]);
        opt.step(&mut model, &grads, lr, 1).unwrap();

        let m_hat = ((1.0 - beta1) * g) / (1.0 - beta1);
        let v_hat = ((1.0 - beta2) * g * g) / (1.0 - beta2);
        let expected = p0 - lr * m_hat / (v_hat.sqrt() + eps);
        let got = model.group(0).tensors[0].1.data()[0];
        assert!((got - expected).abs() < 1e-15, "got {got}, expected {expected}");
    }

    #[test]
    fn warmup_ramp_convention() {
        // warmup 0.05 over L=100 ramps across the first 5 iterations
        assert_eq!(warmup_lr(1e-3, 1, 100, 0.05), 1e-3 * (1.0 / 5.0));
        assert_eq!(warmup_lr(1e-3, 4, 100, 0.05), 1e-3 * (4.0 / 5.0));
        assert_eq!(warmup_lr(1e-3, 5, 100, 0.05), 1e-3);
        assert_eq!(warmup_lr(1e-3, 99, 100, 0.05), 1e-3);
        // no warmup
        assert_eq!(warmup_lr(1e-3, 1, 100, 0.0), 1e-3);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut model = single_param_model();
        let mut grads: Vec<Vec<Tensor>> = vec![model
            .group(0)
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()];
        grads[0][0].data_mut()[0] = f64::NAN;
        let mut opt =
            Optimizer::new(OptimizerKind::Adam, AdamHyper::default(), &model, &[0]);
        assert!(opt.step(&mut model, &grads, 1e-3, 1).is_err());
    }

    #[test]
    fn step_zero_iteration_rejected() {
        let mut model = single_param_model();
        let grads: Vec<Vec<Tensor>> = vec![model
            .group(0)
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect()];
        let mut opt =
            Optimizer::new(OptimizerKind::Adam, AdamHyper::default(), &model, &[0]);
        assert!(opt.step(&mut model, &grads, 1e-3, 0).is_err());
    }
}
