//! Same-padded 3x3 convolution kernels over channels-last images.
//!
//! Weights are `[9, cin, cout]` with taps in row-major order. Widths of 8,
//! 16 and 32 output channels use fixed-size accumulators that stay in
//! registers; other widths take the slice path.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Dims {
    fn pixels(&self) -> usize {
        self.batch * self.h * self.w
    }

    /// Calls `f(tap, src_pixel)` for every in-bounds neighbour of `(n, i, j)`.
    #[inline(always)]
    fn for_taps(&self, n: usize, i: usize, j: usize, mut f: impl FnMut(usize, usize)) {
        for di in 0..3 {
            let ii = i + di;
            if ii == 0 || ii > self.h {
                continue;
            }
            for dj in 0..3 {
                let jj = j + dj;
                if jj == 0 || jj > self.w {
                    continue;
                }
                f(di * 3 + dj, (n * self.h + ii - 1) * self.w + jj - 1);
            }
        }
    }
}

/// `out = conv(x, w) + bias`.
pub(crate) fn forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: Dims) -> Vec<f64> {
    match d.cout {
        8 => forward_fixed::<8>(x, w, bias, d),
        16 => forward_fixed::<16>(x, w, bias, d),
        32 => forward_fixed::<32>(x, w, bias, d),
        _ => forward_dyn(x, w, bias, d),
    }
}

fn forward_fixed<const C: usize>(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: Dims) -> Vec<f64> {
    // four neighbouring output pixels share every weight row load;
    // out-of-image neighbours read a zero row
    let cin = d.cin;
    let zeros = vec![0.0; cin];
    let mut out = vec![0.0; d.pixels() * C];
    let mut init = [0.0; C];
    if let Some(b) = bias {
        init.copy_from_slice(b);
    }
    for n in 0..d.batch {
        for i in 0..d.h {
            for jb in (0..d.w).step_by(4) {
                let npx = (d.w - jb).min(4);
                let (mut a0, mut a1, mut a2, mut a3) = (init, init, init, init);
                for di in 0..3 {
                    let ii = i + di;
                    if ii == 0 || ii > d.h {
                        continue;
                    }
                    let row_base = (n * d.h + ii - 1) * d.w;
                    for dj in 0..3 {
                        let wt = &w[(di * 3 + dj) * cin * C..(di * 3 + dj + 1) * cin * C];
                        let src = |r: usize| -> &[f64] {
                            let jj = jb + r + dj;
                            if r < npx && jj >= 1 && jj <= d.w {
                                &x[(row_base + jj - 1) * cin..(row_base + jj) * cin]
                            } else {
                                &zeros
                            }
                        };
                        let (s0, s1, s2, s3) = (src(0), src(1), src(2), src(3));
                        for ci in 0..cin {
                            let row: &[f64; C] = wt[ci * C..(ci + 1) * C].try_into().unwrap();
                            let (x0, x1, x2, x3) = (s0[ci], s1[ci], s2[ci], s3[ci]);
                            for k in 0..C {
                                a0[k] += x0 * row[k];
                                a1[k] += x1 * row[k];
                                a2[k] += x2 * row[k];
                                a3[k] += x3 * row[k];
                            }
                        }
                    }
                }
                for (r, acc) in [a0, a1, a2, a3].iter().enumerate().take(npx) {
                    let p = (n * d.h + i) * d.w + jb + r;
                    out[p * C..(p + 1) * C].copy_from_slice(acc);
                }
            }
        }
    }
    out
}

fn forward_dyn(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: Dims) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut out = vec![0.0; d.pixels() * cout];
    let mut p = 0;
    for n in 0..d.batch {
        for i in 0..d.h {
            for j in 0..d.w {
                let acc = &mut out[p * cout..(p + 1) * cout];
                if let Some(b) = bias {
                    acc.copy_from_slice(b);
                }
                d.for_taps(n, i, j, |tap, src| {
                    let xin = &x[src * cin..(src + 1) * cin];
                    let wt = &w[tap * cin * cout..(tap + 1) * cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != 0.0 {
                            for (a, wv) in acc.iter_mut().zip(&wt[ci * cout..(ci + 1) * cout]) {
                                *a += xv * wv;
                            }
                        }
                    }
                });
                p += 1;
            }
        }
    }
    out
}

/// Input gradient: a convolution of `gy` with the spatially flipped,
/// channel-transposed kernel.
pub(crate) fn grad_input(gy: &[f64], w: &[f64], d: Dims) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut wf = vec![0.0; 9 * cout * cin];
    for tap in 0..9 {
        let ft = 8 - tap;
        for ci in 0..cin {
            for co in 0..cout {
                wf[(ft * cout + co) * cin + ci] = w[(tap * cin + ci) * cout + co];
            }
        }
    }
    forward(gy, &wf, None, Dims { cin: cout, cout: cin, ..d })
}

/// Weight gradient `[9, cin, cout]`.
pub(crate) fn grad_weight(x: &[f64], gy: &[f64], d: Dims) -> Vec<f64> {
    match d.cout {
        8 => grad_weight_fixed::<8>(x, gy, d),
        16 => grad_weight_fixed::<16>(x, gy, d),
        32 => grad_weight_fixed::<32>(x, gy, d),
        _ => grad_weight_dyn(x, gy, d),
    }
}

fn grad_weight_fixed<const C: usize>(x: &[f64], gy: &[f64], d: Dims) -> Vec<f64> {
    // one output row at a time; for each tap and block of four input
    // channels the 4 x C partial sums stay in registers along the row
    let cin = d.cin;
    let blocks = cin / 4;
    let mut gw = vec![0.0; 9 * cin * C];
    for n in 0..d.batch {
        for i in 0..d.h {
            let grow = &gy[(n * d.h + i) * d.w * C..(n * d.h + i + 1) * d.w * C];
            if grow.iter().all(|v| *v == 0.0) {
                continue;
            }
            for di in 0..3 {
                let ii = i + di;
                if ii == 0 || ii > d.h {
                    continue;
                }
                let xrow = &x[(n * d.h + ii - 1) * d.w * cin..(n * d.h + ii) * d.w * cin];
                for dj in 0..3 {
                    let tap = di * 3 + dj;
                    // output column j reads input column j + dj - 1
                    let j0 = if dj == 0 { 1 } else { 0 };
                    let j1 = if dj == 2 { d.w - 1 } else { d.w };
                    let gwt = &mut gw[tap * cin * C..(tap + 1) * cin * C];
                    for blk in 0..blocks {
                        let (mut a0, mut a1, mut a2, mut a3) = ([0.0f64; C], [0.0f64; C], [0.0f64; C], [0.0f64; C]);
                        for j in j0..j1 {
                            let g: &[f64; C] = grow[j * C..(j + 1) * C].try_into().unwrap();
                            let src = (j + dj - 1) * cin + blk * 4;
                            let xv: &[f64; 4] = xrow[src..src + 4].try_into().unwrap();
                            for k in 0..C {
                                a0[k] += xv[0] * g[k];
                                a1[k] += xv[1] * g[k];
                                a2[k] += xv[2] * g[k];
                                a3[k] += xv[3] * g[k];
                            }
                        }
                        for (r, acc) in [a0, a1, a2, a3].iter().enumerate() {
                            let row = &mut gwt[(blk * 4 + r) * C..(blk * 4 + r + 1) * C];
                            for k in 0..C {
                                row[k] += acc[k];
                            }
                        }
                    }
                    for ci in blocks * 4..cin {
                        let mut acc = [0.0f64; C];
                        for j in j0..j1 {
                            let xv = xrow[(j + dj - 1) * cin + ci];
                            for k in 0..C {
                                acc[k] += xv * grow[j * C + k];
                            }
                        }
                        let row = &mut gwt[ci * C..(ci + 1) * C];
                        for k in 0..C {
                            row[k] += acc[k];
                        }
                    }
                }
            }
        }
    }
    gw
}

fn grad_weight_dyn(x: &[f64], gy: &[f64], d: Dims) -> Vec<f64> {
    let (cin, cout) = (d.cin, d.cout);
    let mut gw = vec![0.0; 9 * cin * cout];
    let mut p = 0;
    for n in 0..d.batch {
        for i in 0..d.h {
            for j in 0..d.w {
                let g = &gy[p * cout..(p + 1) * cout];
                p += 1;
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                d.for_taps(n, i, j, |tap, src| {
                    let xin = &x[src * cin..(src + 1) * cin];
                    let gwt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv != 0.0 {
                            for (a, gv) in gwt[ci * cout..(ci + 1) * cout].iter_mut().zip(g) {
                                *a += xv * gv;
                            }
                        }
                    }
                });
            }
        }
    }
    gw
}
