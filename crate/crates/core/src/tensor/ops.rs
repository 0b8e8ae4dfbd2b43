//! Raw numeric kernels shared by the graph's forward and backward passes.

/// Marker for an absent neighbour in a [`Rulebook`].
pub const NO_NEIGHBOR: u32 = u32::MAX;

/// Gather table for a convolution evaluated at a fixed set of output sites.
///
/// `neighbors[o * kernel + k]` is the input row read by kernel tap `k` at
/// output site `o`, or [`NO_NEIGHBOR`] when that tap falls on an empty or
/// out-of-bounds position (it then contributes zero).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rulebook {
    pub n_in: usize,
    pub n_out: usize,
    pub kernel: usize,
    pub neighbors: Vec<u32>,
}

impl Rulebook {
    pub fn taps(&self, out_site: usize) -> &[u32] {
        &self.neighbors[out_site * self.kernel..(out_site + 1) * self.kernel]
    }
}

/// Grouping of input rows into output rows, used by max pooling.
///
/// Output row `o` reduces input rows `members[offsets[o]..offsets[o + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolBook {
    pub n_in: usize,
    pub offsets: Vec<usize>,
    pub members: Vec<u32>,
}

impl PoolBook {
    pub fn n_out(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn group(&self, o: usize) -> &[u32] {
        &self.members[self.offsets[o]..self.offsets[o + 1]]
    }
}

/// `out (n×m) = a (n×k) · b (k×m)`, overwriting `out`.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (n×k) += g (n×m) · bᵀ` where `b` is `k×m`.
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out (k×m) += aᵀ · g` where `a` is `n×k` and `g` is `n×m`.
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Reorders conv weights from `(out, in, taps)` to `(taps, in, out)` so the
/// innermost loop of the gather kernel runs over contiguous output channels.
pub(crate) fn weights_to_tap_major(w: &[f64], cout: usize, cin: usize, taps: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..taps {
                t[(k * cin + ci) * cout + co] = w[(co * cin + ci) * taps + k];
            }
        }
    }
    t
}

pub(crate) fn tap_major_to_weights(t: &[f64], cout: usize, cin: usize, taps: usize) -> Vec<f64> {
    let mut w = vec![0.0; t.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for k in 0..taps {
                w[(co * cin + ci) * taps + k] = t[(k * cin + ci) * cout + co];
            }
        }
    }
    w
}

/// Gather convolution: every output site sums its taps' input rows through
/// the tap's weight slice.
pub(crate) fn sparse_conv_forward(
    input: &[f64],
    wt: &[f64],
    bias: &[f64],
    book: &Rulebook,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; book.n_out * cout];
    for o in 0..book.n_out {
        let orow = &mut out[o * cout..(o + 1) * cout];
        orow.copy_from_slice(bias);
        for (k, &nb) in book.taps(o).iter().enumerate() {
            if nb == NO_NEIGHBOR {
                continue;
            }
            let x = &input[nb as usize * cin..(nb as usize + 1) * cin];
            let wk = &wt[k * cin * cout..(k + 1) * cin * cout];
            for (ci, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wk[ci * cout..(ci + 1) * cout];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov += xv * wv;
                }
            }
        }
    }
    out
}

/// Scatter pass of the gather convolution. Returns `(d_input, d_wt, d_bias)`
/// where `d_wt` is in tap-major layout.
pub(crate) fn sparse_conv_backward(
    input: &[f64],
    wt: &[f64],
    grad_out: &[f64],
    book: &Rulebook,
    cin: usize,
    cout: usize,
    want_input: bool,
    want_weight: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d_in = if want_input {
        vec![0.0; book.n_in * cin]
    } else {
        Vec::new()
    };
    let mut d_wt = if want_weight {
        vec![0.0; wt.len()]
    } else {
        Vec::new()
    };
    let mut d_bias = vec![0.0; cout];
    for o in 0..book.n_out {
        let g = &grad_out[o * cout..(o + 1) * cout];
        for (b, &gv) in d_bias.iter_mut().zip(g) {
            *b += gv;
        }
        for (k, &nb) in book.taps(o).iter().enumerate() {
            if nb == NO_NEIGHBOR {
                continue;
            }
            let base = k * cin * cout;
            let nb = nb as usize;
            if want_input {
                let wk = &wt[base..base + cin * cout];
                let dx = &mut d_in[nb * cin..(nb + 1) * cin];
                for (ci, dv) in dx.iter_mut().enumerate() {
                    let wrow = &wk[ci * cout..(ci + 1) * cout];
                    *dv += wrow.iter().zip(g).map(|(w, gv)| w * gv).sum::<f64>();
                }
            }
            if want_weight {
                let x = &input[nb * cin..(nb + 1) * cin];
                let dwk = &mut d_wt[base..base + cin * cout];
                for (ci, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let drow = &mut dwk[ci * cout..(ci + 1) * cout];
                    for (dw, &gv) in drow.iter_mut().zip(g) {
                        *dw += xv * gv;
                    }
                }
            }
        }
    }
    (d_in, d_wt, d_bias)
}

/// Channelwise max over each pooling group. Returns the pooled rows and the
/// winning input row per (output, channel); ties keep the earliest member.
pub(crate) fn max_pool_forward(input: &[f64], book: &PoolBook, c: usize) -> (Vec<f64>, Vec<u32>) {
    let n_out = book.n_out();
    let mut out = vec![f64::NEG_INFINITY; n_out * c];
    let mut arg = vec![NO_NEIGHBOR; n_out * c];
    for o in 0..n_out {
        for &m in book.group(o) {
            let x = &input[m as usize * c..(m as usize + 1) * c];
            for ch in 0..c {
                if x[ch] > out[o * c + ch] {
                    out[o * c + ch] = x[ch];
                    arg[o * c + ch] = m;
                }
            }
        }
    }
    for (v, a) in out.iter_mut().zip(&arg) {
        if *a == NO_NEIGHBOR {
            *v = 0.0;
        }
    }
    (out, arg)
}
