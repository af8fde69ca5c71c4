use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_finite, check_len, Error, Result};

/// Feedforward network: ReLU on hidden layers, identity on the output.
///
/// Parameters live in one flat vector. Layer `l` stores its weight matrix
/// row-major as `in × out` followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Parameter and input gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Activations kept by a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    batch: usize,
    /// `acts[0]` is the input; `acts[l]` the post-activation output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl BatchCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has at least the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `c = a·b (+ c if accumulate)`. `a` is `m × k`, `b` is `k × n`; strides are
/// given so transposed views can be passed without copying.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size every buffer to cover the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Net {
    /// Uniform fan-in initialization: weights and biases of a layer with `n`
    /// inputs are drawn from `U(−1/√n, 1/√n)`.
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let len = w[0] * w[1] + w[1];
            for p in &mut net.params[off..off + len] {
                *p = rng.random_range(-bound..bound);
            }
            off += len;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        check_len("network parameters", net.params.len(), params.len())?;
        check_finite("network parameters", &params)?;
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offsets of the weight block and bias block of layer `l`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.output().to_vec())
    }

    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Result<BatchCache> {
        check_len("network input", batch * self.input_dim(), x.len())?;
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let w = &self.params[w_off..b_off];
            let b = &self.params[b_off..b_off + n_out];
            let mut y = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            gemm(
                batch,
                n_in,
                n_out,
                &acts[l],
                (n_in as isize, 1),
                w,
                (n_out as isize, 1),
                &mut y,
                true,
            );
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        Ok(BatchCache { batch, acts })
    }

    /// Gradients of `Σ_b ⟨grad_out_b, f(x_b)⟩`, summed over the batch.
    pub fn backward_batch(&self, cache: &BatchCache, grad_out: &[f64]) -> Result<Gradients> {
        let batch = cache.batch;
        check_len("upstream gradient", batch * self.output_dim(), grad_out.len())?;
        let layers = self.sizes.len() - 1;
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &cache.acts[l];
            // dW = Xᵀ · δ
            gemm(
                n_in,
                batch,
                n_out,
                input,
                (1, n_in as isize),
                &delta,
                (n_out as isize, 1),
                &mut grads[w_off..b_off],
                false,
            );
            let gb = &mut grads[b_off..b_off + n_out];
            for row in delta.chunks_exact(n_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            // dX = δ · Wᵀ
            let mut dx = vec![0.0; batch * n_in];
            gemm(
                batch,
                n_out,
                n_in,
                &delta,
                (n_out as isize, 1),
                &self.params[w_off..b_off],
                (1, n_out as isize),
                &mut dx,
                false,
            );
            if l > 0 {
                for (g, a) in dx.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            delta = dx;
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<Gradients> {
        let cache = self.forward_batch(x, 1)?;
        self.backward_batch(&cache, grad_out)
    }

    /// `self ← (1 − τ)·self + τ·main`.
    pub fn polyak_from(&mut self, main: &Net, tau: f64) -> Result<()> {
        if self.sizes != main.sizes {
            return Err(Error::DimensionMismatch {
                context: "polyak update",
                expected: self.params.len(),
                actual: main.params.len(),
            });
        }
        polyak_update(&main.params, &mut self.params, tau)
    }
}

/// Elementwise `target ← (1 − τ)·target + τ·main`.
pub fn polyak_update(main: &[f64], target: &mut [f64], tau: f64) -> Result<()> {
    check_len("polyak target", main.len(), target.len())?;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("polyak tau {tau} outside (0, 1]")));
    }
    for (t, m) in target.iter_mut().zip(main) {
        *t = (1.0 - tau) * *t + tau * m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_net_gives_zero_output() {
        let net = Net::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let net = Net::from_params(&[2, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[0.3, -4.0]).unwrap(), vec![0.3, -4.0]);
    }

    #[test]
    fn hand_computed_two_layer() {
        // hidden = relu([1 −1; 2 0.5]ᵀ x + [0, −1]) with rows indexed by input
        // x = (1, 2): pre = (1·1 + 2·2, 1·(−1) + 2·0.5) + (0, −1) = (5, −1) → (5, 0)
        // out = 3·5 − 1·0 + 0.5 = 15.5
        let params = vec![1.0, -1.0, 2.0, 0.5, 0.0, -1.0, 3.0, -1.0, 0.5];
        let net = Net::from_params(&[2, 2, 1], params).unwrap();
        assert_eq!(net.forward(&[1.0, 2.0]).unwrap(), vec![15.5]);
    }

    #[test]
    fn linear_weight_gradient_is_input() {
        let net = Net::from_params(&[3, 1], vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let g = net.backward(&[1.0, 2.0, 3.0], &[1.0]).unwrap();
        assert_eq!(&g.params[..3], &[1.0, 2.0, 3.0]);
        assert_eq!(g.params[3], 1.0);
        assert_eq!(g.input, vec![0.2, -0.1, 0.4]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng::stream(1, &[]);
        let net = Net::new(&[4, 8, 8, 3], &mut r).unwrap();
        let g = net.backward(&[0.1, 0.2, -0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|v| *v == 0.0));
    }

    #[test]
    fn batched_forward_matches_single() {
        let mut r = rng::stream(2, &[]);
        let net = Net::new(&[3, 5, 2], &mut r).unwrap();
        let xs = [0.1, 0.5, -0.2, 1.0, -1.0, 0.3];
        let cache = net.forward_batch(&xs, 2).unwrap();
        let a = net.forward(&xs[..3]).unwrap();
        let b = net.forward(&xs[3..]).unwrap();
        let out = cache.output();
        for i in 0..2 {
            assert!((out[i] - a[i]).abs() < 1e-14);
            assert!((out[2 + i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn polyak_limits() {
        let mut t = vec![0.0, 2.0];
        polyak_update(&[1.0, 1.0], &mut t, 0.5).unwrap();
        assert_eq!(t, vec![0.5, 1.5]);
        polyak_update(&[3.0, -3.0], &mut t, 1.0).unwrap();
        assert_eq!(t, vec![3.0, -3.0]);
        assert!(polyak_update(&[1.0], &mut [0.0], 0.0).is_err());
        assert!(polyak_update(&[1.0, 2.0], &mut [0.0], 0.5).is_err());
    }

    #[test]
    fn polyak_converges_geometrically() {
        let mut t = vec![0.0];
        let tau = 0.1;
        for n in 1..=50 {
            polyak_update(&[1.0], &mut t, tau).unwrap();
            let expected = 1.0 - (1.0 - tau).powi(n);
            assert!((t[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let net = Net::zeros(&[2, 1]).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(Net::zeros(&[2]).is_err());
        assert!(Net::from_params(&[2, 1], vec![0.0; 2]).is_err());
    }
}
