//! Fused CPU operators with hand-written backward passes for the hot layers
//! (depthwise convolution, batch normalisation, GELU). Arithmetic runs in
//! f64 on the host regardless of the tensor dtype.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

type CResult<T> = candle_core::Result<T>;

fn read(s: &CpuStorage, l: &Layout) -> CResult<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op needs a contiguous input".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg("fused op supports f32 and f64 only".into())),
    })
}

fn write(v: Vec<f64>, like: &CpuStorage) -> CpuStorage {
    match like {
        CpuStorage::F64(_) => CpuStorage::F64(v),
        _ => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
    }
}

fn host(t: &Tensor) -> CResult<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn tensor(v: Vec<f64>, shape: &[usize], like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
}

impl Dims {
    fn out(&self) -> (usize, usize) {
        (self.h / self.stride, self.w / self.stride)
    }

    /// Calls `f(plane, out_row, in_row, tap, j0, j1)` for every output row
    /// and vertically valid tap; output columns `j0..j1` read input column
    /// `stride * j + dx - 1`. Row arguments are flat offsets.
    fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let (oh, ow) = self.out();
        let s = self.stride;
        for plane in 0..self.b * self.c {
            for i in 0..oh {
                for dy in 0..3 {
                    let y = s * i + dy;
                    if y == 0 || y > self.h {
                        continue;
                    }
                    for dx in 0..3 {
                        let j0 = usize::from(dx == 0);
                        let j1 = ow.min((self.w - dx) / s + 1);
                        f(plane, (plane * oh + i) * ow, (plane * self.h + y - 1) * self.w, dy * 3 + dx, j0, j1);
                    }
                }
            }
        }
    }
}

struct Depthwise(Dims);

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let d = self.0;
        let x = read(s1, l1)?;
        let k = read(s2, l2)?;
        let (oh, ow) = d.out();
        let mut out = vec![0.0; d.b * d.c * oh * ow];
        let st = d.stride;
        d.for_each_row(|plane, o, i, tap, j0, j1| {
            let kv = k[(plane % d.c) * 9 + tap];
            let dx = tap % 3;
            for j in j0..j1 {
                out[o + j] += kv * x[i + st * j + dx - 1];
            }
        });
        Ok((write(out, s1), Shape::from((d.b, d.c, oh, ow))))
    }

    fn bwd(&self, x: &Tensor, k: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let d = self.0;
        let xs = host(x)?;
        let ks = host(k)?;
        let g = host(grad)?;
        let mut dx_buf = vec![0.0; xs.len()];
        let mut dk = vec![0.0; d.c * 9];
        let st = d.stride;
        d.for_each_row(|plane, o, i, tap, j0, j1| {
            let kc = (plane % d.c) * 9 + tap;
            let kv = ks[kc];
            let dx = tap % 3;
            let mut acc = 0.0;
            for j in j0..j1 {
                let src = i + st * j + dx - 1;
                dx_buf[src] += kv * g[o + j];
                acc += xs[src] * g[o + j];
            }
            dk[kc] += acc;
        });
        Ok((Some(tensor(dx_buf, x.dims(), x)?), Some(tensor(dk, k.dims(), k)?)))
    }
}

/// Zero-padded 3x3 depthwise convolution of `x` [B,C,H,W] with `kernel`
/// [C,9] (row-major taps). Stride 2 keeps every second output row and
/// column of the stride 1 result.
pub fn depthwise3x3(x: &Tensor, kernel: &Tensor, stride: usize) -> CResult<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, Depthwise(Dims { b, c, h, w, stride }))
}

/// Per-channel `(mean, biased variance)` of an NCHW tensor.
pub fn channel_stats(x: &Tensor) -> CResult<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let v = host(x)?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (p, chunk) in v.chunks(hw).enumerate() {
        mean[p % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for (p, chunk) in v.chunks(hw).enumerate() {
        let m = mean[p % c];
        var[p % c] += chunk.iter().map(|x| (x - m) * (x - m)).sum::<f64>();
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((mean, var))
}

struct Norm {
    mean: Vec<f64>,
    invstd: Vec<f64>,
    /// Whether the statistics were computed from the input itself.
    batch_stats: bool,
    hw: usize,
}

impl CustomOp3 for Norm {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let x = read(s1, l1)?;
        let gamma = read(s2, l2)?;
        let beta = read(s3, l3)?;
        let c = gamma.len();
        let mut out = x;
        for (p, chunk) in out.chunks_mut(self.hw).enumerate() {
            let ch = p % c;
            let (m, s, g, bt) = (self.mean[ch], self.invstd[ch], gamma[ch], beta[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) * s * g + bt);
        }
        Ok((write(out, s1), l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let xs = host(x)?;
        let gm = host(gamma)?;
        let g = host(grad)?;
        let c = gm.len();
        let n = (xs.len() / c) as f64;
        let mut dbeta = vec![0.0; c];
        let mut dgamma = vec![0.0; c];
        for (p, (xc, gc)) in xs.chunks(self.hw).zip(g.chunks(self.hw)).enumerate() {
            let ch = p % c;
            let (m, s) = (self.mean[ch], self.invstd[ch]);
            for (xv, gv) in xc.iter().zip(gc) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * (xv - m) * s;
            }
        }
        let mut dx = g.clone();
        for (p, (dc, xc)) in dx.chunks_mut(self.hw).zip(xs.chunks(self.hw)).enumerate() {
            let ch = p % c;
            let (m, s) = (self.mean[ch], self.invstd[ch]);
            let scale = gm[ch] * s;
            if self.batch_stats {
                for (d, xv) in dc.iter_mut().zip(xc) {
                    let xhat = (xv - m) * s;
                    *d = scale * (*d - dbeta[ch] / n - xhat * dgamma[ch] / n);
                }
            } else {
                dc.iter_mut().for_each(|d| *d *= scale);
            }
        }
        Ok((
            Some(tensor(dx, x.dims(), x)?),
            Some(tensor(dgamma, gamma.dims(), gamma)?),
            Some(tensor(dbeta, beta.dims(), beta)?),
        ))
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel. With
/// `batch_stats` the gradient accounts for `mean` and `var` being the
/// statistics of `x` itself.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    batch_stats: bool,
) -> CResult<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let op = Norm {
        mean: mean.to_vec(),
        invstd: var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
        batch_stats,
        hw: h * w,
    };
    x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, op)
}

struct Gelu;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn cdf(x: f64) -> f64 {
    0.5 * (1.0 + candle_core::cpu::erf::erf_f64(x * std::f64::consts::FRAC_1_SQRT_2))
}

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let out = read(s, l)?.into_iter().map(|x| x * cdf(x)).collect();
        Ok((write(out, s), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let xs = host(x)?;
        let g = host(grad)?;
        let dx = xs
            .iter()
            .zip(&g)
            .map(|(&x, &g)| g * (cdf(x) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()))
            .collect();
        Ok(Some(tensor(dx, x.dims(), x)?))
    }
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}
