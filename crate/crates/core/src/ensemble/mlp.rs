use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Batch-mean gradients with a larger Euclidean norm are rescaled to it.
pub const MAX_GRAD_NORM: f64 = 10.0;

/// Two-layer feedforward regressor `W2 relu(W1 x + b1) + b2`.
///
/// Weights are stored row-major: `w1` is `hidden x input`, `w2` is
/// `output x hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Reusable buffers for forward and backward passes.
#[derive(Clone, Debug, Default)]
pub(crate) struct Scratch {
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
    g_out: Vec<f64>,
    g_hid: Vec<f64>,
    gw1: Vec<f64>,
    gb1: Vec<f64>,
    gw2: Vec<f64>,
    gb2: Vec<f64>,
}

impl Predictor {
    /// He-uniform initialisation for the first layer, Glorot-uniform for the
    /// second, zero biases.
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let a1 = (6.0 / input as f64).sqrt();
        let a2 = (6.0 / (hidden + output) as f64).sqrt();
        let w1 = (0..hidden * input).map(|_| rng.random_range(-a1..a1)).collect();
        let w2 = (0..output * hidden).map(|_| rng.random_range(-a2..a2)).collect();
        Predictor { input, hidden, output, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; output] }
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// First-layer pre-activation contribution of the leading `prefix.len()`
    /// inputs, bias included.
    pub(crate) fn partial_pre(&self, prefix: &[f64], pre: &mut [f64]) {
        debug_assert!(prefix.len() <= self.input);
        for (j, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[j * self.input..j * self.input + prefix.len()];
            *p = self.b1[j] + row.iter().zip(prefix).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Completes a forward pass from a partial pre-activation and the
    /// remaining `suffix` inputs.
    pub(crate) fn finish(&self, partial: &[f64], suffix: &[f64], act: &mut [f64], out: &mut [f64]) {
        let off = self.input - suffix.len();
        for j in 0..self.hidden {
            let row = &self.w1[j * self.input + off..(j + 1) * self.input];
            let z = partial[j] + row.iter().zip(suffix).map(|(w, x)| w * x).sum::<f64>();
            act[j] = z.max(0.0);
        }
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.w2[k * self.hidden..(k + 1) * self.hidden];
            *o = self.b2[k] + row.iter().zip(act.iter()).map(|(w, h)| w * h).sum::<f64>();
        }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        let mut pre = vec![0.0; self.hidden];
        let mut act = vec![0.0; self.hidden];
        self.partial_pre(&[], &mut pre);
        self.finish(&pre, x, &mut act, out);
    }

    /// One minibatch gradient step on `0.5 * ||f(x) - y||^2` averaged over
    /// the batch. Returns the batch loss before the update.
    pub(crate) fn sgd_step(&mut self, batch: &[(&[f64], &[f64])], lr: f64, s: &mut Scratch) -> f64 {
        let (h, n_in, n_out) = (self.hidden, self.input, self.output);
        s.pre.resize(h, 0.0);
        s.act.resize(h, 0.0);
        s.out.resize(n_out, 0.0);
        s.g_out.resize(n_out, 0.0);
        s.g_hid.resize(h, 0.0);
        s.gw1.clear();
        s.gw1.resize(h * n_in, 0.0);
        s.gb1.clear();
        s.gb1.resize(h, 0.0);
        s.gw2.clear();
        s.gw2.resize(n_out * h, 0.0);
        s.gb2.clear();
        s.gb2.resize(n_out, 0.0);

        let mut loss = 0.0;
        for &(x, y) in batch {
            self.partial_pre(&[], &mut s.pre);
            for j in 0..h {
                let row = &self.w1[j * n_in..(j + 1) * n_in];
                s.pre[j] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
                s.act[j] = s.pre[j].max(0.0);
            }
            for k in 0..n_out {
                let row = &self.w2[k * h..(k + 1) * h];
                s.out[k] = self.b2[k] + row.iter().zip(&s.act).map(|(w, a)| w * a).sum::<f64>();
                s.g_out[k] = s.out[k] - y[k];
                loss += 0.5 * s.g_out[k] * s.g_out[k];
            }
            s.g_hid.iter_mut().for_each(|g| *g = 0.0);
            for k in 0..n_out {
                let g = s.g_out[k];
                s.gb2[k] += g;
                let row = &self.w2[k * h..(k + 1) * h];
                let grow = &mut s.gw2[k * h..(k + 1) * h];
                for j in 0..h {
                    grow[j] += g * s.act[j];
                    s.g_hid[j] += g * row[j];
                }
            }
            for j in 0..h {
                if s.pre[j] <= 0.0 {
                    continue;
                }
                let g = s.g_hid[j];
                s.gb1[j] += g;
                let grow = &mut s.gw1[j * n_in..(j + 1) * n_in];
                for (gw, v) in grow.iter_mut().zip(x) {
                    *gw += g * v;
                }
            }
        }
        let n = batch.len() as f64;
        let norm = [&s.gw1, &s.gb1, &s.gw2, &s.gb2]
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
            / n;
        let scale = if norm > MAX_GRAD_NORM { lr * MAX_GRAD_NORM / (norm * n) } else { lr / n };
        for (w, g) in self.w1.iter_mut().zip(&s.gw1) {
            *w -= scale * g;
        }
        for (w, g) in self.b1.iter_mut().zip(&s.gb1) {
            *w -= scale * g;
        }
        for (w, g) in self.w2.iter_mut().zip(&s.gw2) {
            *w -= scale * g;
        }
        for (w, g) in self.b2.iter_mut().zip(&s.gb2) {
            *w -= scale * g;
        }
        loss / batch.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Predictor::new(3, 6, 2, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let y = [0.5, -0.2];
        let loss = |p: &Predictor| {
            let mut o = [0.0; 2];
            p.forward(&x, &mut o);
            0.5 * ((o[0] - y[0]).powi(2) + (o[1] - y[1]).powi(2))
        };
        // A step with lr = 1 subtracts the gradient; recover it by differencing.
        let mut stepped = net.clone();
        stepped.sgd_step(&[(&x, &y)], 1.0, &mut Scratch::default());
        let eps = 1e-6;
        for idx in [0, 4, 11, 17] {
            let mut plus = net.clone();
            plus.w1[idx] += eps;
            let mut minus = net.clone();
            minus.w1[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = net.w1[idx] - stepped.w1[idx];
            assert!((fd - analytic).abs() < 1e-6, "w1[{idx}]: fd {fd} vs {analytic}");
        }
        for idx in [0, 5, 11] {
            let mut plus = net.clone();
            plus.w2[idx] += eps;
            let mut minus = net.clone();
            minus.w2[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = net.w2[idx] - stepped.w2[idx];
            assert!((fd - analytic).abs() < 1e-6, "w2[{idx}]: fd {fd} vs {analytic}");
        }
    }

    #[test]
    fn partial_forward_equals_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Predictor::new(5, 8, 3, &mut rng);
        let x = [0.1, 0.2, -0.3, 0.4, -0.5];
        let mut full = [0.0; 3];
        net.forward(&x, &mut full);
        let mut pre = vec![0.0; 8];
        let mut act = vec![0.0; 8];
        let mut split = [0.0; 3];
        net.partial_pre(&x[..3], &mut pre);
        net.finish(&pre, &x[3..], &mut act, &mut split);
        for (a, b) in full.iter().zip(&split) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
