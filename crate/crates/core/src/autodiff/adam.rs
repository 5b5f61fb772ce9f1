use super::ParamStore;

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    assert_eq!(state.m.len(), params.len(), "optimizer state does not match parameters");
    let (b1, b2) = betas;
    state.step += 1;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = &grads[i];
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(id).data_mut();
        assert_eq!(g.len(), p.len(), "gradient shape mismatch for parameter {i}");
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Step schedule: `base` multiplied by `factor` once `epoch >= decay_epoch`.
pub fn step_lr(base: f64, epoch: usize, decay_epoch: usize, factor: f64) -> f64 {
    if epoch >= decay_epoch {
        base * factor
    } else {
        base
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(v: f64) -> (ParamStore, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = single(1.5);
        let mut st = AdamState::new(&s);
        st.m[0][0] = 0.0;
        adam_step(&mut s, &[vec![0.0]], &mut st, 0.01, (0.9, 0.999), 1e-8);
        assert_eq!(s.get(id).item(), 1.5);
        // moments decay towards zero
        st.m[0][0] = 1.0;
        st.v[0][0] = 1.0;
        let mut s2 = s.clone();
        adam_step(&mut s2, &[vec![0.0]], &mut st, 0.0, (0.9, 0.999), 1e-8);
        assert!((st.m[0][0] - 0.9).abs() < 1e-15);
        assert!((st.v[0][0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_magnitude() {
        // m = 0.1, v = 0.001; bias-corrected both to 1 -> update = -lr * 1/(1+eps)
        let (mut s, id) = single(0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[vec![1.0]], &mut st, 0.01, (0.9, 0.999), 1e-8);
        assert!((s.get(id).item() + 0.01).abs() < 1e-6);
    }

    #[test]
    fn schedule_decays_at_epoch_20() {
        assert_eq!(step_lr(0.01, 19, 20, 0.1), 0.01);
        assert!((step_lr(0.01, 20, 20, 0.1) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
    }
}
