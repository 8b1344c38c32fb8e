use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay.
///
/// Moment buffers follow their parameter's shape: when an embedding table
/// gains rows the buffers gain zero rows, and when a parameter is replaced
/// with a different shape its buffers are reset.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.first.get(index)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.second.get(index)
    }

    fn sync(&mut self, store: &ParamStore) {
        for (id, p) in store.iter() {
            let i = id.index();
            if i >= self.first.len() {
                self.first.push(Tensor::zeros(p.value.shape()));
                self.second.push(Tensor::zeros(p.value.shape()));
                continue;
            }
            if self.first[i].shape() == p.value.shape() {
                continue;
            }
            let same_cols = self.first[i].rank() == 2
                && p.value.rank() == 2
                && self.first[i].cols() == p.value.cols()
                && self.first[i].rows() < p.value.rows();
            if same_cols {
                let extra = Tensor::zeros(&[p.value.rows() - self.first[i].rows(), p.value.cols()]);
                self.first[i].append_rows(&extra).expect("same cols");
                self.second[i].append_rows(&extra).expect("same cols");
            } else {
                self.first[i] = Tensor::zeros(p.value.shape());
                self.second[i] = Tensor::zeros(p.value.shape());
            }
        }
    }

    /// One update of every parameter in `store` from its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.sync(store);
        self.step += 1;
        for (i, p) in store.iter_mut().enumerate() {
            if p.grad.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter `{}` {:?}",
                    p.grad.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            adam_update(
                &mut p.value,
                &p.grad,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}

/// Applies one Adam update to a single tensor. `t` is the 1-based step.
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape()
    {
        return Err(Error::Shape(format!(
            "adam: param {:?}, grad {:?}, moments {:?}/{:?}",
            param.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let values = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for (k, &g) in grad.data().iter().enumerate() {
        md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * g;
        vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = md[k] / bc1;
        let v_hat = vd[k] / bc2;
        values[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(g: f64, lr: f64) -> f64 {
        let mut p = Tensor::zeros(&[1]);
        let grad = Tensor::full(&[1], g);
        let mut m = Tensor::zeros(&[1]);
        let mut v = Tensor::zeros(&[1]);
        adam_update(&mut p, &grad, &mut m, &mut v, 1, &AdamConfig::with_lr(lr)).unwrap();
        p.item()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 at t = 1.
        let delta = one_step(1.0, 0.1);
        assert!((delta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        let delta = one_step(-4.0, 0.1);
        assert!((delta - 0.1 * 4.0 / (4.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(one_step(0.0, 0.1), 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut m = Tensor::zeros(&[2]);
        let mut v = Tensor::zeros(&[2]);
        assert!(adam_update(&mut p, &g, &mut m, &mut v, 1, &AdamConfig::default()).is_err());
    }

    #[test]
    fn step_is_deterministic_and_tracks_growth() {
        let mut store = ParamStore::new();
        let id = store.add("emb", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        store.get_mut(id).grad = Tensor::full(&[2, 2], 0.5);
        let mut a = AdamState::new(AdamConfig::with_lr(0.01));
        let mut b = a.clone();
        let mut store_b = store.clone();
        a.step(&mut store).unwrap();
        b.step(&mut store_b).unwrap();
        assert_eq!(store, store_b);

        let mut grown = store.get(id).value.clone();
        grown.append_rows(&Tensor::zeros(&[1, 2])).unwrap();
        store.replace(id, grown);
        a.step(&mut store).unwrap();
        assert_eq!(a.first_moment(0).unwrap().shape(), &[3, 2]);
        // The old rows keep their moments.
        assert!(a.first_moment(0).unwrap().get(0, 0) != 0.0);
        assert_eq!(a.first_moment(0).unwrap().get(2, 0), 0.0);
    }
}
