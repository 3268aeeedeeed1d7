//! Dense 3D convolution kernels with explicit backward passes.
//!
//! Activations are channel-major: element `(c, v)` lives at `c * n + v` where
//! `v` is the x-fastest voxel index and `n` the voxel count. Convolutions are
//! lowered to GEMM through an explicit column buffer.

/// A channel-major activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![0.0; channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims[0] * dims[1] * dims[2]);
        Self {
            channels,
            dims,
            data,
        }
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Per-channel spatial mean.
    pub fn global_average(&self) -> Vec<f64> {
        let n = self.voxels() as f64;
        (0..self.channels)
            .map(|c| self.channel(c).iter().sum::<f64>() / n)
            .collect()
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = alpha * A * B + beta * C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs
    };
    assert!(k == 0 || last(m, k, a_strides) < a.len());
    assert!(k == 0 || last(k, n, b_strides) < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn fill_bias(out: &mut [f64], bias: &[f64], n: usize) {
    for (co, chunk) in out.chunks_exact_mut(n).enumerate() {
        chunk.fill(bias[co]);
    }
}

fn accumulate_bias_grad(dout: &[f64], n: usize, db: &mut [f64]) {
    for (co, chunk) in dout.chunks_exact(n).enumerate() {
        db[co] += chunk.iter().sum::<f64>();
    }
}

/// Column buffer for a 3x3x3 convolution with zero padding 1.
fn im2col3(input: &Act, col: &mut [f64]) {
    let [nx, ny, nz] = input.dims;
    let n = input.voxels();
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let row = &mut col[(ci * 27 + dz * 9 + dy * 3 + dx) * n..][..n];
                    for z in 0..nz {
                        let sz = z as isize + dz as isize - 1;
                        for y in 0..ny {
                            let sy = y as isize + dy as isize - 1;
                            let dst = &mut row[(z * ny + y) * nx..][..nx];
                            if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                                dst.fill(0.0);
                                continue;
                            }
                            let srow = &src[(sz as usize * ny + sy as usize) * nx..][..nx];
                            match dx {
                                0 => {
                                    dst[0] = 0.0;
                                    dst[1..].copy_from_slice(&srow[..nx - 1]);
                                }
                                1 => dst.copy_from_slice(srow),
                                _ => {
                                    dst[..nx - 1].copy_from_slice(&srow[1..]);
                                    dst[nx - 1] = 0.0;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`].
fn col2im3(col: &[f64], out: &mut Act) {
    let [nx, ny, nz] = out.dims;
    let n = out.voxels();
    for ci in 0..out.channels {
        let dst = out.channel_mut(ci);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let row = &col[(ci * 27 + dz * 9 + dy * 3 + dx) * n..][..n];
                    for z in 0..nz {
                        let sz = z as isize + dz as isize - 1;
                        if sz < 0 || sz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let src = &row[(z * ny + y) * nx..][..nx];
                            let drow = &mut dst[(sz as usize * ny + sy as usize) * nx..][..nx];
                            match dx {
                                0 => {
                                    for (d, s) in drow[..nx - 1].iter_mut().zip(&src[1..]) {
                                        *d += s;
                                    }
                                }
                                1 => {
                                    for (d, s) in drow.iter_mut().zip(src) {
                                        *d += s;
                                    }
                                }
                                _ => {
                                    for (d, s) in drow[1..].iter_mut().zip(&src[..nx - 1]) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column buffer for a 2x2x2 stride-2 convolution.
fn im2col_down(input: &Act, col: &mut [f64]) {
    let [nx, ny, _] = input.dims;
    let od = half(input.dims);
    let on = od[0] * od[1] * od[2];
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for kk in 0..8 {
            let (dx, dy, dz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
            let row = &mut col[(ci * 8 + kk) * on..][..on];
            let mut o = 0;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let base = ((2 * z + dz) * ny + 2 * y + dy) * nx + dx;
                    for x in 0..od[0] {
                        row[o] = src[base + 2 * x];
                        o += 1;
                    }
                }
            }
        }
    }
}

fn col2im_down(col: &[f64], out: &mut Act) {
    let [nx, ny, _] = out.dims;
    let od = half(out.dims);
    let on = od[0] * od[1] * od[2];
    for ci in 0..out.channels {
        let dst = out.channel_mut(ci);
        for kk in 0..8 {
            let (dx, dy, dz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
            let row = &col[(ci * 8 + kk) * on..][..on];
            let mut o = 0;
            for z in 0..od[2] {
                for y in 0..od[1] {
                    let base = ((2 * z + dz) * ny + 2 * y + dy) * nx + dx;
                    for x in 0..od[0] {
                        dst[base + 2 * x] += row[o];
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn half(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] / 2, dims[1] / 2, dims[2] / 2]
}

pub fn double(dims: [usize; 3]) -> [usize; 3] {
    [dims[0] * 2, dims[1] * 2, dims[2] * 2]
}

/// Convolution flavours used by the segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// 3x3x3, stride 1, zero padding 1. Weights `[cout][cin][27]`.
    K3,
    /// 1x1x1. Weights `[cout][cin]`.
    K1,
    /// 2x2x2, stride 2. Weights `[cout][cin][8]`.
    Down,
    /// Transposed 2x2x2, stride 2. Weights `[cout][8][cin]`.
    Up,
}

impl ConvKind {
    pub fn taps(self) -> usize {
        match self {
            ConvKind::K3 => 27,
            ConvKind::K1 => 1,
            ConvKind::Down | ConvKind::Up => 8,
        }
    }

    pub fn output_dims(self, dims: [usize; 3]) -> [usize; 3] {
        match self {
            ConvKind::K3 | ConvKind::K1 => dims,
            ConvKind::Down => half(dims),
            ConvKind::Up => double(dims),
        }
    }
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub enum ConvSaved {
    /// Column buffer (K3, Down).
    Col(Vec<f64>),
    /// The layer input itself (K1, Up).
    Input(Act),
}

pub fn conv_forward(
    kind: ConvKind,
    input: &Act,
    w: &[f64],
    b: &[f64],
    cout: usize,
    save: bool,
) -> (Act, Option<ConvSaved>) {
    let cin = input.channels;
    let out_dims = kind.output_dims(input.dims);
    let mut out = Act::zeros(cout, out_dims);
    let on = out.voxels();
    debug_assert_eq!(w.len(), cout * cin * kind.taps());
    debug_assert_eq!(b.len(), cout);
    match kind {
        ConvKind::K3 | ConvKind::Down => {
            let k = cin * kind.taps();
            let mut col = vec![0.0; k * on];
            if kind == ConvKind::K3 {
                im2col3(input, &mut col);
            } else {
                im2col_down(input, &mut col);
            }
            fill_bias(&mut out.data, b, on);
            gemm(cout, k, on, w, (k, 1), &col, (on, 1), 1.0, &mut out.data);
            (out, save.then_some(ConvSaved::Col(col)))
        }
        ConvKind::K1 => {
            fill_bias(&mut out.data, b, on);
            gemm(cout, cin, on, w, (cin, 1), &input.data, (on, 1), 1.0, &mut out.data);
            (out, save.then(|| ConvSaved::Input(input.clone())))
        }
        ConvKind::Up => {
            let n = input.voxels();
            let mut t = vec![0.0; cout * 8 * n];
            gemm(cout * 8, cin, n, w, (cin, 1), &input.data, (n, 1), 0.0, &mut t);
            let [ix, iy, iz] = input.dims;
            let [ox, oy, _] = out_dims;
            for co in 0..cout {
                let dst = out.channel_mut(co);
                dst.fill(b[co]);
                for kk in 0..8 {
                    let (dx, dy, dz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
                    let row = &t[(co * 8 + kk) * n..][..n];
                    let mut v = 0;
                    for z in 0..iz {
                        for y in 0..iy {
                            let base = ((2 * z + dz) * oy + 2 * y + dy) * ox + dx;
                            for x in 0..ix {
                                dst[base + 2 * x] += row[v];
                                v += 1;
                            }
                        }
                    }
                }
            }
            (out, save.then(|| ConvSaved::Input(input.clone())))
        }
    }
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    kind: ConvKind,
    saved: &ConvSaved,
    in_channels: usize,
    in_dims: [usize; 3],
    w: &[f64],
    dout: &Act,
    dw: &mut [f64],
    db: &mut [f64],
    need_input_grad: bool,
) -> Option<Act> {
    let cin = in_channels;
    let cout = dout.channels;
    let on = dout.voxels();
    accumulate_bias_grad(&dout.data, on, db);
    match (kind, saved) {
        (ConvKind::K3 | ConvKind::Down, ConvSaved::Col(col)) => {
            let k = cin * kind.taps();
            // dW += dOut * col^T
            gemm(cout, on, k, &dout.data, (on, 1), col, (1, on), 1.0, dw);
            if !need_input_grad {
                return None;
            }
            let mut dcol = vec![0.0; k * on];
            gemm(k, cout, on, w, (1, k), &dout.data, (on, 1), 0.0, &mut dcol);
            let mut din = Act::zeros(cin, in_dims);
            if kind == ConvKind::K3 {
                col2im3(&dcol, &mut din);
            } else {
                col2im_down(&dcol, &mut din);
            }
            Some(din)
        }
        (ConvKind::K1, ConvSaved::Input(input)) => {
            gemm(cout, on, cin, &dout.data, (on, 1), &input.data, (1, on), 1.0, dw);
            if !need_input_grad {
                return None;
            }
            let mut din = Act::zeros(cin, in_dims);
            gemm(cin, cout, on, w, (1, cin), &dout.data, (on, 1), 0.0, &mut din.data);
            Some(din)
        }
        (ConvKind::Up, ConvSaved::Input(input)) => {
            let n = input.voxels();
            let [ix, iy, iz] = input.dims;
            let [ox, oy, _] = dout.dims;
            let mut dt = vec![0.0; cout * 8 * n];
            for co in 0..cout {
                let src = dout.channel(co);
                for kk in 0..8 {
                    let (dx, dy, dz) = (kk & 1, (kk >> 1) & 1, kk >> 2);
                    let row = &mut dt[(co * 8 + kk) * n..][..n];
                    let mut v = 0;
                    for z in 0..iz {
                        for y in 0..iy {
                            let base = ((2 * z + dz) * oy + 2 * y + dy) * ox + dx;
                            for x in 0..ix {
                                row[v] = src[base + 2 * x];
                                v += 1;
                            }
                        }
                    }
                }
            }
            // dW[(co,k)][ci] += dT * input^T
            gemm(cout * 8, n, cin, &dt, (n, 1), &input.data, (1, n), 1.0, dw);
            if !need_input_grad {
                return None;
            }
            let mut din = Act::zeros(cin, in_dims);
            gemm(cin, cout * 8, n, w, (1, cin), &dt, (n, 1), 0.0, &mut din.data);
            Some(din)
        }
        _ => panic!("saved state does not match convolution kind {kind:?}"),
    }
}

pub fn relu_inplace(a: &mut Act) {
    for v in &mut a.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(output: &Act, grad: &mut Act) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Two-class softmax, returning the foreground probability per voxel.
pub fn softmax2_foreground(logits: &Act) -> Vec<f64> {
    debug_assert_eq!(logits.channels, 2);
    logits
        .channel(0)
        .iter()
        .zip(logits.channel(1))
        .map(|(&z0, &z1)| sigmoid(z1 - z0))
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps gradients w.r.t. `(p_background, p_foreground)` to gradients w.r.t.
/// the two logits, given the foreground probability.
pub fn softmax2_backward(p_fg: &[f64], d_bg: &[f64], d_fg: &[f64], dims: [usize; 3]) -> Act {
    let n = p_fg.len();
    let mut out = Act::zeros(2, dims);
    let (d0, d1) = out.data.split_at_mut(n);
    for i in 0..n {
        let p1 = p_fg[i];
        let p0 = 1.0 - p1;
        let g = p0 * p1 * (d_fg[i] - d_bg[i]);
        d1[i] = g;
        d0[i] = -g;
    }
    out
}
