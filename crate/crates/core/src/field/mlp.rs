use rand::Rng;

/// Fully connected network with ReLU hidden layers and a linear output layer.
///
/// Parameters live in an external flat slice: for each layer a row-major
/// `fan_out × fan_in` weight block followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    act_offsets: Vec<usize>,
}

impl Mlp {
    /// `dims` lists the input width, every hidden width, and the output width.
    pub fn new(dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let act_offsets = dims
            .iter()
            .scan(0, |acc, &d| {
                let o = *acc;
                *acc += d;
                Some(o)
            })
            .collect();
        Mlp { dims, act_offsets }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Σ (fan_in + 1)·fan_out.
    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Length of the activation buffer: input, every hidden output, final output.
    pub fn activation_len(&self) -> usize {
        self.dims.iter().sum()
    }

    /// `(weights, biases)` ranges of layer `l` within the parameter slice.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.dims[..l + 1]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
        let w_end = start + fan_in * fan_out;
        (start..w_end, w_end..w_end + fan_out)
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.n_layers() {
            let (w, b) = self.layer_ranges(l);
            let bound = (6.0 / self.dims[l] as f64).sqrt();
            for v in &mut params[w] {
                *v = rng.random_range(-bound..bound);
            }
            params[b].fill(0.0);
        }
    }

    /// Runs the network in place. `acts[..input_dim]` must hold the input;
    /// on return every layer's output follows it and the final output is the
    /// tail `output_dim` values.
    pub fn forward(&self, params: &[f64], acts: &mut [f64]) {
        let mut in_off = 0;
        let mut p = 0;
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let out_off = in_off + fan_in;
            let (head, tail) = acts.split_at_mut(out_off);
            let x = &head[in_off..];
            let out = &mut tail[..fan_out];
            let w = &params[p..p + fan_in * fan_out];
            let b = &params[p + fan_in * fan_out..p + fan_in * fan_out + fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = b[o] + dot(row, x);
                out[o] = if l == last { z } else { z.max(0.0) };
            }
            p += (fan_in + 1) * fan_out;
            in_off = out_off;
        }
    }

    pub fn output<'a>(&self, acts: &'a [f64]) -> &'a [f64] {
        &acts[acts.len() - self.output_dim()..]
    }

    /// Accumulates parameter gradients into `grads` (same layout as `params`)
    /// and, if requested, writes the input gradient into `grad_input`.
    /// `scratch` is resized as needed.
    pub fn backward(
        &self,
        params: &[f64],
        acts: &[f64],
        grad_output: &[f64],
        grads: &mut [f64],
        grad_input: Option<&mut [f64]>,
        scratch: &mut Vec<f64>,
    ) {
        let n = self.n_layers();
        let max_w = *self.dims.iter().max().unwrap();
        scratch.clear();
        scratch.resize(2 * max_w, 0.0);
        let (cur, nxt) = scratch.split_at_mut(max_w);
        cur[..grad_output.len()].copy_from_slice(grad_output);

        let offs = &self.act_offsets;
        let mut grad_input = grad_input;
        let mut cur = cur;
        let mut nxt = nxt;
        for l in (0..n).rev() {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let (w_r, b_r) = self.layer_ranges(l);
            let x = &acts[offs[l]..offs[l] + fan_in];
            let y = &acts[offs[l + 1]..offs[l + 1] + fan_out];
            let g = &mut cur[..fan_out];
            if l != n - 1 {
                for (gi, yi) in g.iter_mut().zip(y) {
                    if *yi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let g = &cur[..fan_out];
            {
                let gb = &mut grads[b_r];
                for (a, b) in gb.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let w = &params[w_r.clone()];
            let gw = &mut grads[w_r];
            let need_input = l > 0 || grad_input.is_some();
            let gx = &mut nxt[..fan_in];
            if need_input {
                gx.fill(0.0);
            }
            for o in 0..fan_out {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                axpy(go, x, &mut gw[o * fan_in..(o + 1) * fan_in]);
                if need_input {
                    axpy(go, &w[o * fan_in..(o + 1) * fan_in], gx);
                }
            }
            if l == 0 {
                if let Some(gi) = grad_input.as_deref_mut() {
                    gi.copy_from_slice(&nxt[..fan_in]);
                }
            }
            std::mem::swap(&mut cur, &mut nxt);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_give_zero_output() {
        let mlp = Mlp::new(vec![5, 7, 7, 3]);
        let params = vec![0.0; mlp.param_count()];
        let mut acts = vec![0.0; mlp.activation_len()];
        acts[..5].copy_from_slice(&[1.0, -2.0, 3.0, 0.5, 9.0]);
        mlp.forward(&params, &mut acts);
        assert!(mlp.output(&acts).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count() {
        let mlp = Mlp::new(vec![48, 64, 64, 16]);
        assert_eq!(mlp.param_count(), 49 * 64 + 65 * 64 + 65 * 16);
        let (w, b) = mlp.layer_ranges(2);
        assert_eq!(w.start, 49 * 64 + 65 * 64);
        assert_eq!(b.end, mlp.param_count());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp::new(vec![4, 6, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = vec![0.0; mlp.param_count()];
        mlp.init(&mut params, &mut rng);
        for v in params.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let input = [0.3, -0.7, 1.1, 0.25];
        let gout = [0.7, -1.3];
        let loss = |p: &[f64], x: &[f64]| {
            let mut acts = vec![0.0; mlp.activation_len()];
            acts[..4].copy_from_slice(x);
            mlp.forward(p, &mut acts);
            let y = mlp.output(&acts);
            y[0] * gout[0] + y[1] * gout[1]
        };
        let mut acts = vec![0.0; mlp.activation_len()];
        acts[..4].copy_from_slice(&input);
        mlp.forward(&params, &mut acts);
        let mut grads = vec![0.0; params.len()];
        let mut gin = vec![0.0; 4];
        let mut scratch = Vec::new();
        mlp.backward(&params, &acts, &gout, &mut grads, Some(&mut gin), &mut scratch);
        let h = 1e-6;
        for k in 0..params.len() {
            let mut pp = params.clone();
            pp[k] += h;
            let mut pm = params.clone();
            pm[k] -= h;
            let fd = (loss(&pp, &input) - loss(&pm, &input)) / (2.0 * h);
            assert!((fd - grads[k]).abs() < 1e-7, "param {k}: {fd} vs {}", grads[k]);
        }
        for k in 0..4 {
            let mut xp = input;
            xp[k] += h;
            let mut xm = input;
            xm[k] -= h;
            let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * h);
            assert!((fd - gin[k]).abs() < 1e-7);
        }
    }
}
