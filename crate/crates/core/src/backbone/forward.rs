//! Forward pass and exact reverse-mode gradients.

use rayon::prelude::*;

use super::{block_param, Model, EMBED, HEAD, LN_EPS, LN_F_BIAS, LN_F_GAIN, POS};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, ParamMap, Real};
use crate::vocab::TokenId;

/// Examples per gradient shard. Shards are reduced in order, so gradients do
/// not depend on the number of worker threads.
const SHARD: usize = 4;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// A supervised position: `weight · −log p(token | sequence)` joins the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub position: usize,
    pub token: TokenId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<Target>,
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        let e = (v.to_f64() - max).exp();
        sum += e;
        *v = T::from_f64(e);
    }
    for v in row.iter_mut() {
        *v = T::from_f64(v.to_f64() / sum);
    }
}

/// Row-wise layer norm of `x` (rows of width `dim`). Fills the normalized
/// values and reciprocal standard deviations used by the backward pass.
pub fn layer_norm<T: Real>(
    x: &[T],
    dim: usize,
    gain: &[T],
    bias: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [f64],
) {
    for (r, row) in x.chunks_exact(dim).enumerate() {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for j in 0..dim {
            let h = (row[j].to_f64() - mean) * rs;
            xhat[r * dim + j] = T::from_f64(h);
            out[r * dim + j] = T::from_f64(h) * gain[j] + bias[j];
        }
    }
}

/// Accumulates into `dx`, `dgain` and `dbias`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<T: Real>(
    dout: &[T],
    xhat: &[T],
    rstd: &[f64],
    gain: &[T],
    dim: usize,
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let mut dxhat = vec![0.0f64; dim];
    for (r, rs) in rstd.iter().enumerate() {
        let base = r * dim;
        let (mut m1, mut m2) = (0.0, 0.0);
        for j in 0..dim {
            let g = dout[base + j];
            dgain[j] += g * xhat[base + j];
            dbias[j] += g;
            let d = (g * gain[j]).to_f64();
            dxhat[j] = d;
            m1 += d;
            m2 += d * xhat[base + j].to_f64();
        }
        m1 /= dim as f64;
        m2 /= dim as f64;
        for j in 0..dim {
            dx[base + j] += T::from_f64(rs * (dxhat[j] - m1 - xhat[base + j].to_f64() * m2));
        }
    }
}

struct LayerCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<f64>,
    a1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention probabilities, `heads × len × len`.
    p: Vec<T>,
    o: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<f64>,
    a2: Vec<T>,
    h: Vec<T>,
    g: Vec<T>,
}

struct Trunk<T> {
    layers: Vec<LayerCache<T>>,
    xhat_f: Vec<T>,
    rstd_f: Vec<f64>,
    /// Final normalized hidden states, `len × dim`.
    out: Vec<T>,
}

impl<T: Real> Model<T> {
    fn w(&self, name: &str) -> &[T] {
        self.params.get(name).expect("parameters checked at construction").data()
    }

    fn trunk(&self, tokens: &[TokenId]) -> Result<Trunk<T>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (n, d, hd, heads) = (tokens.len(), cfg.dim, cfg.hidden(), cfg.heads);
        let dh = cfg.head_dim();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        let (embed, pos) = (self.w(EMBED), self.w(POS));
        let mut x = vec![T::ZERO; n * d];
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            for j in 0..d {
                x[i * d + j] = embed[t * d + j] + pos[i * d + j];
            }
        }

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut c = LayerCache {
                xhat1: vec![T::ZERO; n * d],
                rstd1: vec![0.0; n],
                a1: vec![T::ZERO; n * d],
                q: vec![T::ZERO; n * d],
                k: vec![T::ZERO; n * d],
                v: vec![T::ZERO; n * d],
                p: vec![T::ZERO; heads * n * n],
                o: vec![T::ZERO; n * d],
                xhat2: vec![T::ZERO; n * d],
                rstd2: vec![0.0; n],
                a2: vec![T::ZERO; n * d],
                h: vec![T::ZERO; n * hd],
                g: vec![T::ZERO; n * hd],
            };
            let b = |s: &str| block_param(l, s);
            layer_norm(&x, d, self.w(&b("ln1.gain")), self.w(&b("ln1.bias")), &mut c.a1, &mut c.xhat1, &mut c.rstd1);
            matmul(n, d, d, &c.a1, self.w(&b("Wq")), &mut c.q, false);
            matmul(n, d, d, &c.a1, self.w(&b("Wk")), &mut c.k, false);
            matmul(n, d, d, &c.a1, self.w(&b("Wv")), &mut c.v, false);
            for h in 0..heads {
                let off = h * dh;
                let p = &mut c.p[h * n * n..(h + 1) * n * n];
                T::gemm(n, dh, n, &c.q[off..], d as isize, 1, &c.k[off..], 1, d as isize, T::ZERO, p, n as isize);
                for row in p.chunks_exact_mut(n) {
                    row.iter_mut().for_each(|v| *v *= scale);
                    softmax_in_place(row);
                }
                T::gemm(n, n, dh, p, n as isize, 1, &c.v[off..], d as isize, 1, T::ZERO, &mut c.o[off..], d as isize);
            }
            matmul(n, d, d, &c.o, self.w(&b("Wo")), &mut x, true);

            layer_norm(&x, d, self.w(&b("ln2.gain")), self.w(&b("ln2.bias")), &mut c.a2, &mut c.xhat2, &mut c.rstd2);
            matmul(n, d, hd, &c.a2, self.w(&b("W1")), &mut c.h, false);
            for (g, h) in c.g.iter_mut().zip(&c.h) {
                *g = T::from_f64(gelu(h.to_f64()));
            }
            matmul(n, hd, d, &c.g, self.w(&b("W2")), &mut x, true);
            layers.push(c);
        }

        let mut out = vec![T::ZERO; n * d];
        let mut xhat_f = vec![T::ZERO; n * d];
        let mut rstd_f = vec![0.0; n];
        layer_norm(&x, d, self.w(LN_F_GAIN), self.w(LN_F_BIAS), &mut out, &mut xhat_f, &mut rstd_f);
        Ok(Trunk { layers, xhat_f, rstd_f, out })
    }

    /// Logits for every position, row-major `len × vocab`.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<T>> {
        let trunk = self.trunk(tokens)?;
        let (n, d, v) = (tokens.len(), self.config.dim, self.vocab_size());
        let mut logits = vec![T::ZERO; n * v];
        matmul(n, d, v, &trunk.out, self.w(HEAD), &mut logits, false);
        Ok(logits)
    }

    /// Weighted negative log-likelihood of one example's targets.
    pub fn example_loss(&self, ex: &Example) -> Result<f64> {
        let logits = self.forward(&ex.tokens)?;
        let v = self.vocab_size();
        let mut loss = 0.0;
        for t in &ex.targets {
            check_target(t, ex.tokens.len(), v)?;
            let row = &logits[t.position * v..(t.position + 1) * v];
            loss += t.weight * nll(row, t.token as usize);
        }
        Ok(loss)
    }

    /// Sum of weighted target NLLs over `examples`, with its gradient.
    pub fn loss_and_grad(&self, examples: &[Example]) -> Result<(f64, ParamMap<T>)> {
        let parts: Vec<Result<(f64, ParamMap<T>)>> = examples
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut grads = self.params.zeros_like();
                let mut loss = 0.0;
                for ex in chunk {
                    loss += self.accumulate_grad(ex, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.params.zeros_like();
        for part in parts {
            let (l, g) = part?;
            total += l;
            grads.add_scaled(&g, T::ONE)?;
        }
        Ok((total, grads))
    }

    /// Adds one example's gradient into `grads` and returns its loss.
    pub fn accumulate_grad(&self, ex: &Example, grads: &mut ParamMap<T>) -> Result<f64> {
        let cfg = &self.config;
        let tokens = &ex.tokens;
        let (n, d, hd, heads, v) = (tokens.len(), cfg.dim, cfg.hidden(), cfg.heads, self.vocab_size());
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        for t in &ex.targets {
            check_target(t, n, v)?;
        }
        if ex.targets.is_empty() {
            return Ok(0.0);
        }
        let trunk = self.trunk(tokens)?;

        // Head over the supervised rows only.
        let r = ex.targets.len();
        let mut sel = vec![T::ZERO; r * d];
        for (i, t) in ex.targets.iter().enumerate() {
            sel[i * d..(i + 1) * d].copy_from_slice(&trunk.out[t.position * d..(t.position + 1) * d]);
        }
        let mut dlogits = vec![T::ZERO; r * v];
        matmul(r, d, v, &sel, self.w(HEAD), &mut dlogits, false);
        let mut loss = 0.0;
        for (i, t) in ex.targets.iter().enumerate() {
            let row = &mut dlogits[i * v..(i + 1) * v];
            loss += t.weight * nll(row, t.token as usize);
            softmax_in_place(row);
            row[t.token as usize] -= T::ONE;
            let w = T::from_f64(t.weight);
            row.iter_mut().for_each(|x| *x *= w);
        }
        matmul_at(d, r, v, &sel, &dlogits, grads.get_mut(HEAD)?.data_mut(), true);
        let mut dsel = vec![T::ZERO; r * d];
        matmul_bt(r, v, d, &dlogits, self.w(HEAD), &mut dsel, false);
        let mut dout = vec![T::ZERO; n * d];
        for (i, t) in ex.targets.iter().enumerate() {
            for j in 0..d {
                dout[t.position * d + j] += dsel[i * d + j];
            }
        }

        let mut dx = vec![T::ZERO; n * d];
        {
            let mut dg = vec![T::ZERO; d];
            let mut db = vec![T::ZERO; d];
            layer_norm_backward(&dout, &trunk.xhat_f, &trunk.rstd_f, self.w(LN_F_GAIN), d, &mut dx, &mut dg, &mut db);
            add_into(grads, LN_F_GAIN, &dg)?;
            add_into(grads, LN_F_BIAS, &db)?;
        }

        let mut da = vec![T::ZERO; n * d];
        let mut dhid = vec![T::ZERO; n * hd];
        let mut dq = vec![T::ZERO; n * d];
        let mut dk = vec![T::ZERO; n * d];
        let mut dv = vec![T::ZERO; n * d];
        let mut dattn = vec![T::ZERO; n * d];
        let mut dp = vec![T::ZERO; n * n];
        for l in (0..cfg.layers).rev() {
            let c = &trunk.layers[l];
            let b = |s: &str| block_param(l, s);

            // MLP: x += gelu(a2 W1) W2
            matmul_at(hd, n, d, &c.g, &dx, grads.get_mut(&b("W2"))?.data_mut(), true);
            matmul_bt(n, d, hd, &dx, self.w(&b("W2")), &mut dhid, false);
            for (dh_, h) in dhid.iter_mut().zip(&c.h) {
                *dh_ *= T::from_f64(gelu_grad(h.to_f64()));
            }
            matmul_at(d, n, hd, &c.a2, &dhid, grads.get_mut(&b("W1"))?.data_mut(), true);
            matmul_bt(n, hd, d, &dhid, self.w(&b("W1")), &mut da, false);
            let mut dg = vec![T::ZERO; d];
            let mut db = vec![T::ZERO; d];
            layer_norm_backward(&da, &c.xhat2, &c.rstd2, self.w(&b("ln2.gain")), d, &mut dx, &mut dg, &mut db);
            add_into(grads, &b("ln2.gain"), &dg)?;
            add_into(grads, &b("ln2.bias"), &db)?;

            // Attention: x += attn(a1) Wo
            matmul_at(d, n, d, &c.o, &dx, grads.get_mut(&b("Wo"))?.data_mut(), true);
            matmul_bt(n, d, d, &dx, self.w(&b("Wo")), &mut dattn, false);
            for h in 0..heads {
                let off = h * dh;
                let p = &c.p[h * n * n..(h + 1) * n * n];
                T::gemm(n, dh, n, &dattn[off..], d as isize, 1, &c.v[off..], 1, d as isize, T::ZERO, &mut dp, n as isize);
                T::gemm(n, n, dh, p, 1, n as isize, &dattn[off..], d as isize, 1, T::ZERO, &mut dv[off..], d as isize);
                for (prow, dprow) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                    let dot: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                    for (pv, dpv) in prow.iter().zip(dprow.iter_mut()) {
                        *dpv = T::from_f64(pv.to_f64() * (dpv.to_f64() - dot) * scale);
                    }
                }
                T::gemm(n, n, dh, &dp, n as isize, 1, &c.k[off..], d as isize, 1, T::ZERO, &mut dq[off..], d as isize);
                T::gemm(n, n, dh, &dp, 1, n as isize, &c.q[off..], d as isize, 1, T::ZERO, &mut dk[off..], d as isize);
            }
            matmul_at(d, n, d, &c.a1, &dq, grads.get_mut(&b("Wq"))?.data_mut(), true);
            matmul_at(d, n, d, &c.a1, &dk, grads.get_mut(&b("Wk"))?.data_mut(), true);
            matmul_at(d, n, d, &c.a1, &dv, grads.get_mut(&b("Wv"))?.data_mut(), true);
            matmul_bt(n, d, d, &dq, self.w(&b("Wq")), &mut da, false);
            matmul_bt(n, d, d, &dk, self.w(&b("Wk")), &mut da, true);
            matmul_bt(n, d, d, &dv, self.w(&b("Wv")), &mut da, true);
            let mut dg = vec![T::ZERO; d];
            let mut db = vec![T::ZERO; d];
            layer_norm_backward(&da, &c.xhat1, &c.rstd1, self.w(&b("ln1.gain")), d, &mut dx, &mut dg, &mut db);
            add_into(grads, &b("ln1.gain"), &dg)?;
            add_into(grads, &b("ln1.bias"), &db)?;
        }

        let dembed = grads.get_mut(EMBED)?.data_mut();
        for (i, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            for j in 0..d {
                dembed[t * d + j] += dx[i * d + j];
            }
        }
        let dpos = grads.get_mut(POS)?.data_mut();
        for i in 0..n * d {
            dpos[i] += dx[i];
        }
        Ok(loss)
    }
}

fn check_target(t: &Target, len: usize, vocab: usize) -> Result<()> {
    if t.position >= len {
        return Err(Error::Shape(format!("target position {} outside sequence of {len}", t.position)));
    }
    if t.token as usize >= vocab {
        return Err(Error::TokenOutOfRange { id: t.token, total: vocab });
    }
    Ok(())
}

/// `−log softmax(row)[target]`, computed in `f64`.
fn nll<T: Real>(row: &[T], target: usize) -> f64 {
    let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[target].to_f64()
}

fn add_into<T: Real>(grads: &mut ParamMap<T>, name: &str, delta: &[T]) -> Result<()> {
    for (g, d) in grads.get_mut(name)?.data_mut().iter_mut().zip(delta) {
        *g += *d;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::vocab::VocabLayout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            max_len: 10,
            seed: 3,
            vocab: VocabLayout::standard(32, 8, 4).unwrap(),
        }
    }

    fn example(rng: &mut ChaCha8Rng, v: usize) -> Example {
        let n = 7;
        let tokens: Vec<TokenId> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let targets = [1usize, 4, 6]
            .iter()
            .map(|&p| Target { position: p, token: rng.random_range(0..v as u32), weight: 0.5 + p as f64 })
            .collect();
        Example { tokens, targets }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_808_009_392_522_8).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0f64, 1001.0, 999.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[1] > row[0] && row[0] > row[2]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = Model::init(config()).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = model.vocab_size();
        let ex = example(&mut rng, v);
        let mut grads = model.params.zeros_like();
        let loss = model.accumulate_grad(&ex, &mut grads).unwrap();
        assert!((loss - model.example_loss(&ex).unwrap()).abs() < 1e-10);

        let h = 1e-5;
        let names: Vec<String> = model.params.names().map(String::from).collect();
        for name in names {
            let len = model.params.get(&name).unwrap().len();
            for k in 0..4 {
                let idx = (k * 7919 + 13) % len;
                let mut plus = model.clone();
                plus.params.get_mut(&name).unwrap().data_mut()[idx] += h;
                let mut minus = model.clone();
                minus.params.get_mut(&name).unwrap().data_mut()[idx] -= h;
                let fd = (plus.example_loss(&ex).unwrap() - minus.example_loss(&ex).unwrap()) / (2.0 * h);
                let an = grads.get(&name).unwrap().data()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-5 || (fd - an).abs() < 1e-9, "{name}[{idx}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn batch_gradient_is_sum_of_examples_and_thread_independent() {
        let model = Model::init(config()).unwrap().cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = model.vocab_size();
        let batch: Vec<Example> = (0..9).map(|_| example(&mut rng, v)).collect();
        let (loss, grads) = model.loss_and_grad(&batch).unwrap();
        let mut want = model.params.zeros_like();
        let mut want_loss = 0.0;
        for ex in &batch {
            want_loss += model.accumulate_grad(ex, &mut want).unwrap();
        }
        assert!((loss - want_loss).abs() < 1e-9);
        let mut diff = grads.clone();
        diff.add_scaled(&want, -1.0).unwrap();
        assert!(diff.global_norm() < 1e-9);

        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let (loss3, grads3) = pool.install(|| model.loss_and_grad(&batch)).unwrap();
        assert_eq!(loss.to_bits(), loss3.to_bits());
        assert!(grads.bit_eq(&grads3));
    }

    #[test]
    fn attention_is_bidirectional() {
        let model = Model::init(config()).unwrap();
        let a = model.forward(&[1, 2, 3, 4]).unwrap();
        let b = model.forward(&[1, 2, 3, 5]).unwrap();
        let v = model.vocab_size();
        assert_ne!(&a[..v], &b[..v], "first position must see the last");
    }

    #[test]
    fn zero_layer_model_is_normalized_embedding_times_head() {
        let model = Model::init(ModelConfig { layers: 0, ..config() }).unwrap().cast::<f64>();
        let tokens = [3u32, 0, 17];
        let logits = model.forward(&tokens).unwrap();
        let (d, v) = (model.config.dim, model.vocab_size());
        let (embed, pos, head) = (model.w(EMBED), model.w(POS), model.w(HEAD));
        for (i, &t) in tokens.iter().enumerate() {
            let x: Vec<f64> = (0..d).map(|j| embed[t as usize * d + j] + pos[i * d + j]).collect();
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64;
            let y: Vec<f64> = x.iter().map(|a| (a - mean) / (var + 1e-5).sqrt()).collect();
            for c in 0..v {
                let want: f64 = (0..d).map(|j| y[j] * head[j * v + c]).sum();
                assert!((logits[i * v + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn positions_matter() {
        let model = Model::init(config()).unwrap();
        let a = model.forward(&[5, 9, 2]).unwrap();
        let b = model.forward(&[9, 5, 2]).unwrap();
        let v = model.vocab_size();
        assert_ne!(&a[2 * v..], &b[2 * v..]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = Model::init(config()).unwrap();
        let trunk = model.trunk(&[1, 2, 3, 4, 5]).unwrap();
        for layer in &trunk.layers {
            for row in layer.p.chunks_exact(5) {
                let s: f64 = row.iter().map(|&x| x as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn layer_norm_ignores_input_scale() {
        let x = [0.3f64, -1.2, 2.5, 0.0, 0.7, 0.1];
        let x2: Vec<f64> = x.iter().map(|a| a * 2.0).collect();
        let (gain, bias) = ([1.5, 0.5, 2.0], [0.1, 0.0, -0.3]);
        let run = |x: &[f64]| {
            let (mut out, mut xhat, mut rstd) = (vec![0.0; 6], vec![0.0; 6], vec![0.0; 2]);
            layer_norm(x, 3, &gain, &bias, &mut out, &mut xhat, &mut rstd);
            out
        };
        for (a, b) in run(&x).iter().zip(run(&x2)) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = Model::init(config()).unwrap();
        let a = model.forward(&[7, 1, 30, 2]).unwrap();
        let b = model.forward(&[7, 1, 30, 2]).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::init(config()).unwrap();
        let v = model.vocab_size() as u32;
        assert!(matches!(model.forward(&[v]), Err(Error::TokenOutOfRange { .. })));
        assert!(model.forward(&[0; 11]).is_err());
        let ex = Example { tokens: vec![0, 1], targets: vec![Target { position: 2, token: 0, weight: 1.0 }] };
        assert!(model.example_loss(&ex).is_err());
    }
}
