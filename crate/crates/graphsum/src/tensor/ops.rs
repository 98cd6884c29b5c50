//! Forward operations and their reverse-mode rules.
//!
//! Every op validates shapes up front, refuses non-finite outputs, and
//! registers a closure computing the vector-Jacobian product for each parent.
//! Closures capture `Rc` clones of whatever forward values they need, so the
//! backward sweep never borrows the tape.

use std::rc::Rc;

use rand::Rng;

use super::{BackwardFn, Node, Tape, Tensor};
use crate::error::{Error, Result};

impl Tape {
    fn push_rc(
        &mut self,
        op: &'static str,
        data: Rc<Vec<f64>>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {bad} in output of {op}"
            )));
        }
        let flows = parents.iter().any(|p| self.flows(*p));
        Ok(self.push(Node {
            data,
            shape,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if flows { Some(backward) } else { None },
            flows,
        }))
    }

    fn dims2(&self, t: Tensor, op: &str) -> Result<(usize, usize)> {
        match *self.shape(t) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Shape(format!("{op} expects a 2-d tensor, got {s:?}"))),
        }
    }

    /// Rows/cols view of the last axis: any tensor is (numel/last, last).
    fn last_axis(&self, t: Tensor, op: &str) -> Result<(usize, usize)> {
        let shape = self.shape(t);
        let Some(&cols) = shape.last() else {
            return Err(Error::Shape(format!("{op} expects a non-empty shape")));
        };
        Ok((self.numel(t) / cols, cols))
    }

    /// Standard matrix product `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let ad = self.rc_data(a);
        let bd = self.rc_data(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let av = ad[i * ka + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let (adc, bdc, k) = (Rc::clone(&ad), Rc::clone(&bd), ka);
        self.push_rc(
            "matmul",
            Rc::new(out),
            vec![m, n],
            vec![a, b],
            Box::new(move |d| {
                // d_a = d · b^T, d_b = a^T · d
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += d[i * n + j] * bdc[p * n + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = adc[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * d[i * n + j];
                        }
                    }
                }
                vec![da, db]
            }),
        )
    }

    pub fn transpose(&mut self, x: Tensor) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = self.rc_data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push_rc(
            "transpose",
            Rc::new(out),
            vec![c, r],
            vec![x],
            Box::new(move |d| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d[j * r + i];
                    }
                }
                vec![dx]
            }),
        )
    }

    fn same_shape(&self, a: Tensor, b: Tensor, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op} needs matching shapes, got {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let (ad, bd) = (self.rc_data(a), self.rc_data(b));
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect();
        self.push_rc(
            "add",
            Rc::new(out),
            self.shape(a).to_vec(),
            vec![a, b],
            Box::new(move |d| vec![d.to_vec(), d.to_vec()]),
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "sub")?;
        let (ad, bd) = (self.rc_data(a), self.rc_data(b));
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x - y).collect();
        self.push_rc(
            "sub",
            Rc::new(out),
            self.shape(a).to_vec(),
            vec![a, b],
            Box::new(move |d| vec![d.to_vec(), d.iter().map(|v| -v).collect()]),
        )
    }

    /// Element-wise product; `mul(x, x)` yields the textbook `2x` gradient
    /// through accumulation.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        let (ad, bd) = (self.rc_data(a), self.rc_data(b));
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
        let (adc, bdc) = (Rc::clone(&ad), Rc::clone(&bd));
        self.push_rc(
            "mul",
            Rc::new(out),
            self.shape(a).to_vec(),
            vec![a, b],
            Box::new(move |d| {
                vec![
                    d.iter().zip(bdc.iter()).map(|(g, y)| g * y).collect(),
                    d.iter().zip(adc.iter()).map(|(g, x)| g * x).collect(),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        self.affine(x, c, 0.0)
    }

    /// `out = mul * x + add`, element-wise with scalar coefficients.
    pub fn affine(&mut self, x: Tensor, mul: f64, add: f64) -> Result<Tensor> {
        let xd = self.rc_data(x);
        let out: Vec<f64> = xd.iter().map(|v| mul * v + add).collect();
        self.push_rc(
            "affine",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x],
            Box::new(move |d| vec![d.iter().map(|g| mul * g).collect()]),
        )
    }

    /// Adds a length-`c` vector to every row of an `r×c` tensor.
    pub fn add_broadcast_row(&mut self, x: Tensor, v: Tensor) -> Result<Tensor> {
        let (r, c) = self.last_axis(x, "add_broadcast_row")?;
        if self.numel(v) != c {
            return Err(Error::Shape(format!(
                "add_broadcast_row: vector numel {} does not match row width {c}",
                self.numel(v)
            )));
        }
        let (xd, vd) = (self.rc_data(x), self.rc_data(v));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] + vd[j]);
            }
        }
        self.push_rc(
            "add_broadcast_row",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x, v],
            Box::new(move |d| {
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dv[j] += d[i * c + j];
                    }
                }
                vec![d.to_vec(), dv]
            }),
        )
    }

    /// Scales row `i` of `x[r×c]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Tensor, s: Tensor) -> Result<Tensor> {
        let (r, c) = self.last_axis(x, "scale_rows")?;
        if self.numel(s) != r {
            return Err(Error::Shape(format!(
                "scale_rows: scale numel {} does not match row count {r}",
                self.numel(s)
            )));
        }
        let (xd, sd) = (self.rc_data(x), self.rc_data(s));
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] * sd[i]);
            }
        }
        let (xdc, sdc) = (Rc::clone(&xd), Rc::clone(&sd));
        self.push_rc(
            "scale_rows",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x, s],
            Box::new(move |d| {
                let mut dx = vec![0.0; r * c];
                let mut ds = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = d[i * c + j] * sdc[i];
                        ds[i] += d[i * c + j] * xdc[i * c + j];
                    }
                }
                vec![dx, ds]
            }),
        )
    }

    /// Horizontal concatenation of 2-d tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero tensors".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row counts differ ({pr} vs {r})"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let datas: Vec<Rc<Vec<f64>>> = parts.iter().map(|&p| self.rc_data(p)).collect();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (pd, &w) in datas.iter().zip(&widths) {
                out.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let widths_b = widths.clone();
        self.push_rc(
            "concat_cols",
            Rc::new(out),
            vec![r, total],
            parts.to_vec(),
            Box::new(move |d| {
                let mut grads: Vec<Vec<f64>> =
                    widths_b.iter().map(|&w| vec![0.0; r * w]).collect();
                for i in 0..r {
                    let mut off = 0;
                    for (g, &w) in grads.iter_mut().zip(&widths_b) {
                        g[i * w..(i + 1) * w].copy_from_slice(&d[i * total + off..i * total + off + w]);
                        off += w;
                    }
                }
                grads
            }),
        )
    }

    /// Vertical concatenation of 2-d tensors sharing a column count.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero tensors".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut heights = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({pc} vs {c})"
                )));
            }
            heights.push(pr);
        }
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let heights_b = heights.clone();
        self.push_rc(
            "concat_rows",
            Rc::new(out),
            vec![total, c],
            parts.to_vec(),
            Box::new(move |d| {
                let mut grads = Vec::with_capacity(heights_b.len());
                let mut off = 0;
                for &h in &heights_b {
                    grads.push(d[off * c..(off + h) * c].to_vec());
                    off += h;
                }
                grads
            }),
        )
    }

    /// Column window `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols window {start}..{} exceeds width {c}",
                start + len
            )));
        }
        let xd = self.rc_data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        self.push_rc(
            "slice_cols",
            Rc::new(out),
            vec![r, len],
            vec![x],
            Box::new(move |d| {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&d[i * len..(i + 1) * len]);
                }
                vec![dx]
            }),
        )
    }

    /// Row window `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows window {start}..{} exceeds height {r}",
                start + len
            )));
        }
        let xd = self.rc_data(x);
        let out = xd[start * c..(start + len) * c].to_vec();
        self.push_rc(
            "slice_rows",
            Rc::new(out),
            vec![len, c],
            vec![x],
            Box::new(move |d| {
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(d);
                vec![dx]
            }),
        )
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        let xd = self.rc_data(x);
        let total: f64 = xd.iter().sum();
        let n = xd.len();
        self.push_rc(
            "sum",
            Rc::new(vec![total]),
            vec![1],
            vec![x],
            Box::new(move |d| vec![vec![d[0]; n]]),
        )
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        let xd = self.rc_data(x);
        let out: Vec<f64> = xd.iter().map(|&v| v.max(0.0)).collect();
        let xdc = Rc::clone(&xd);
        self.push_rc(
            "relu",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x],
            Box::new(move |d| {
                vec![d
                    .iter()
                    .zip(xdc.iter())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect()]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Tensor) -> Result<Tensor> {
        let xd = self.rc_data(x);
        let out = Rc::new(
            xd.iter()
                .map(|&v| 1.0 / (1.0 + (-v).exp()))
                .collect::<Vec<f64>>(),
        );
        let outc = Rc::clone(&out);
        self.push_rc(
            "sigmoid",
            out,
            self.shape(x).to_vec(),
            vec![x],
            Box::new(move |d| {
                vec![d
                    .iter()
                    .zip(outc.iter())
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect()]
            }),
        )
    }

    pub fn tanh(&mut self, x: Tensor) -> Result<Tensor> {
        let xd = self.rc_data(x);
        let out = Rc::new(xd.iter().map(|&v| v.tanh()).collect::<Vec<f64>>());
        let outc = Rc::clone(&out);
        self.push_rc(
            "tanh",
            out,
            self.shape(x).to_vec(),
            vec![x],
            Box::new(move |d| {
                vec![d
                    .iter()
                    .zip(outc.iter())
                    .map(|(g, &y)| g * (1.0 - y * y))
                    .collect()]
            }),
        )
    }

    /// Inverted dropout. Training mode zeroes each element with probability
    /// `p` and scales survivors by `1/(1-p)`; eval mode returns `x` itself
    /// and consumes no randomness.
    pub fn dropout<R: Rng>(
        &mut self,
        x: Tensor,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let xd = self.rc_data(x);
        let factors: Vec<f64> = (0..xd.len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<f64> = xd.iter().zip(&factors).map(|(v, f)| v * f).collect();
        self.push_rc(
            "dropout",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x],
            Box::new(move |d| vec![d.iter().zip(&factors).map(|(g, f)| g * f).collect()]),
        )
    }

    /// Softmax over the last axis with an optional additive bias and an
    /// optional mask. The bias is either the full logits shape or one row
    /// (`[cols]`) broadcast over rows; the mask likewise. Masked positions
    /// receive zero probability; a fully masked row is an error.
    pub fn softmax_with_bias(
        &mut self,
        logits: Tensor,
        bias: Option<Tensor>,
        mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let (rows, cols) = self.last_axis(logits, "softmax_with_bias")?;
        let ld = self.rc_data(logits);
        let bias_per_row = if let Some(b) = bias {
            let bn = self.numel(b);
            if bn == cols {
                true
            } else if bn == rows * cols {
                false
            } else {
                return Err(Error::Shape(format!(
                    "softmax bias numel {bn} matches neither row width {cols} nor logits numel {}",
                    rows * cols
                )));
            }
        } else {
            false
        };
        let mask_per_row = if let Some(m) = mask {
            if m.len() == cols {
                true
            } else if m.len() == rows * cols {
                false
            } else {
                return Err(Error::Shape(format!(
                    "softmax mask length {} matches neither row width {cols} nor logits numel {}",
                    m.len(),
                    rows * cols
                )));
            }
        } else {
            false
        };
        let bd = bias.map(|b| self.rc_data(b));
        let masked = |m: &[bool], i: usize, j: usize| -> bool {
            if mask_per_row {
                !m[j]
            } else {
                !m[i * cols + j]
            }
        };
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if mask.is_some_and(|m| masked(m, i, j)) {
                    continue;
                }
                let b = bd
                    .as_ref()
                    .map(|b| if bias_per_row { b[j] } else { b[i * cols + j] })
                    .unwrap_or(0.0);
                max = max.max(ld[i * cols + j] + b);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Validation(format!(
                    "softmax row {i} has every position masked"
                )));
            }
            let mut total = 0.0;
            for j in 0..cols {
                if mask.is_some_and(|m| masked(m, i, j)) {
                    continue;
                }
                let b = bd
                    .as_ref()
                    .map(|b| if bias_per_row { b[j] } else { b[i * cols + j] })
                    .unwrap_or(0.0);
                let e = (ld[i * cols + j] + b - max).exp();
                out[i * cols + j] = e;
                total += e;
            }
            for j in 0..cols {
                out[i * cols + j] /= total;
            }
        }
        let out = Rc::new(out);
        let outc = Rc::clone(&out);
        let shape = self.shape(logits).to_vec();
        let mut parents = vec![logits];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        self.push_rc(
            "softmax_with_bias",
            out,
            shape,
            parents,
            Box::new(move |d| {
                // d_logit = y * (d - sum_j d_j y_j) per row; masked y = 0.
                let mut dl = vec![0.0; rows * cols];
                for i in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += d[i * cols + j] * outc[i * cols + j];
                    }
                    for j in 0..cols {
                        dl[i * cols + j] = outc[i * cols + j] * (d[i * cols + j] - dot);
                    }
                }
                if has_bias {
                    let db = if bias_per_row {
                        let mut db = vec![0.0; cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                db[j] += dl[i * cols + j];
                            }
                        }
                        db
                    } else {
                        dl.clone()
                    };
                    vec![dl, db]
                } else {
                    vec![dl]
                }
            }),
        )
    }

    /// Per-row normalization over the last axis of width `d`:
    /// `y = gain * (x - mean) / sqrt(var + eps) + offset` with biased variance.
    pub fn layer_norm(
        &mut self,
        x: Tensor,
        gain: Tensor,
        offset: Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let (rows, d) = self.last_axis(x, "layer_norm")?;
        if self.numel(gain) != d || self.numel(offset) != d {
            return Err(Error::Shape(format!(
                "layer_norm gain/offset must have numel {d}, got {} and {}",
                self.numel(gain),
                self.numel(offset)
            )));
        }
        let (xd, gd, od) = (self.rc_data(x), self.rc_data(gain), self.rc_data(offset));
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let n = (row[j] - mean) * inv;
                normalized[i * d + j] = n;
                out[i * d + j] = gd[j] * n + od[j];
            }
        }
        let normalized = Rc::new(normalized);
        let (normc, gdc) = (Rc::clone(&normalized), Rc::clone(&gd));
        self.push_rc(
            "layer_norm",
            Rc::new(out),
            self.shape(x).to_vec(),
            vec![x, gain, offset],
            Box::new(move |dy| {
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut doffset = vec![0.0; d];
                let dn = d as f64;
                for i in 0..rows {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let g = dy[i * d + j];
                        let xhat = normc[i * d + j];
                        dgain[j] += g * xhat;
                        doffset[j] += g;
                        let dxhat = g * gdc[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat /= dn;
                    mean_dxhat_xhat /= dn;
                    for j in 0..d {
                        let dxhat = dy[i * d + j] * gdc[j];
                        let xhat = normc[i * d + j];
                        dx[i * d + j] =
                            inv_std[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                vec![dx, dgain, doffset]
            }),
        )
    }

    /// Embedding row gather: `out[t] = table[ids[t]]`.
    pub fn embedding(&mut self, table: Tensor, ids: &[usize]) -> Result<Tensor> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Validation(format!(
                "embedding id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let td = self.rc_data(table);
        let n = ids.len();
        let mut out = Vec::with_capacity(n * d);
        for &id in ids {
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let ids_b: Vec<usize> = ids.to_vec();
        self.push_rc(
            "embedding",
            Rc::new(out),
            vec![n, d],
            vec![table],
            Box::new(move |dout| {
                let mut dt = vec![0.0; vocab * d];
                for (t, &id) in ids_b.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dout[t * d + j];
                    }
                }
                vec![dt]
            }),
        )
    }

    /// Fractional row lookup into a constant `l×c` table with center-of-cell
    /// convention: index `i + 0.5` selects row `i` exactly, values in between
    /// interpolate linearly. Differentiable in `s`.
    pub fn interp_rows(&mut self, s: Tensor, table: &[f64], l: usize, c: usize) -> Result<Tensor> {
        if table.len() != l * c {
            return Err(Error::Shape(format!(
                "interp_rows table has {} values, expected {l}x{c}",
                table.len()
            )));
        }
        if l == 0 {
            return Err(Error::Shape("interp_rows needs at least one row".into()));
        }
        let t = self.numel(s);
        let sd = self.rc_data(s);
        let hi = (l - 1) as f64;
        let mut out = vec![0.0; t * c];
        let mut lows = vec![0usize; t];
        let mut highs = vec![0usize; t];
        let mut interior = vec![false; t];
        for (k, &sv) in sd.iter().enumerate() {
            let a = (sv - 0.5).clamp(0.0, hi);
            let i0 = (a.floor() as usize).min(l - 1);
            let i1 = (i0 + 1).min(l - 1);
            let f = a - i0 as f64;
            for j in 0..c {
                out[k * c + j] = (1.0 - f) * table[i0 * c + j] + f * table[i1 * c + j];
            }
            lows[k] = i0;
            highs[k] = i1;
            interior[k] = sv - 0.5 > 0.0 && sv - 0.5 < hi;
        }
        let table_b: Vec<f64> = table.to_vec();
        self.push_rc(
            "interp_rows",
            Rc::new(out),
            vec![t, c],
            vec![s],
            Box::new(move |d| {
                let mut ds = vec![0.0; t];
                for k in 0..t {
                    if !interior[k] {
                        continue;
                    }
                    let (i0, i1) = (lows[k], highs[k]);
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += d[k * c + j] * (table_b[i1 * c + j] - table_b[i0 * c + j]);
                    }
                    ds[k] = acc;
                }
                vec![ds]
            }),
        )
    }

    /// Label-smoothed cross entropy summed over non-pad positions. Returns
    /// the scalar sum and the number of positions it covers.
    pub fn cross_entropy_label_smoothed_sum(
        &mut self,
        logits: Tensor,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<(Tensor, usize)> {
        let (t, v) = self.dims2(logits, "cross_entropy_label_smoothed")?;
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "cross_entropy: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "label smoothing must satisfy 0 <= epsilon < 1, got {epsilon}"
            )));
        }
        if v < 2 {
            return Err(Error::Config("cross_entropy needs vocabulary size >= 2".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id != pad_id && id >= v) {
            return Err(Error::Validation(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let active: Vec<bool> = targets.iter().map(|&id| id != pad_id).collect();
        let count = active.iter().filter(|a| **a).count();
        if count == 0 {
            return Err(Error::Validation(
                "cross_entropy: every position is padding".into(),
            ));
        }
        let ld = self.rc_data(logits);
        let on = 1.0 - epsilon;
        let off = epsilon / (v as f64 - 1.0);
        let mut total = 0.0;
        let mut probs = vec![0.0; t * v];
        for (i, &target) in targets.iter().enumerate() {
            if !active[i] {
                continue;
            }
            let row = &ld[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total_exp = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * v + j] = e;
                total_exp += e;
            }
            let lse = max + total_exp.ln();
            let mut sum_logp = 0.0;
            for (j, &x) in row.iter().enumerate() {
                probs[i * v + j] /= total_exp;
                sum_logp += x - lse;
            }
            let logp_target = row[target] - lse;
            total -= on * logp_target + off * (sum_logp - logp_target);
        }
        let targets_b: Vec<usize> = targets.to_vec();
        let loss = self.push_rc(
            "cross_entropy_label_smoothed",
            Rc::new(vec![total]),
            vec![1],
            vec![logits],
            Box::new(move |d| {
                // d_logits = d * (p - q) at active rows; q is the smoothed target.
                let g = d[0];
                let mut dl = vec![0.0; t * v];
                for (i, &target) in targets_b.iter().enumerate() {
                    if !active[i] {
                        continue;
                    }
                    for j in 0..v {
                        let q = if j == target { on } else { off };
                        dl[i * v + j] = g * (probs[i * v + j] - q);
                    }
                }
                vec![dl]
            }),
        )?;
        Ok((loss, count))
    }

    /// Mean label-smoothed cross entropy over non-pad positions.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Tensor,
        targets: &[usize],
        epsilon: f64,
        pad_id: usize,
    ) -> Result<Tensor> {
        let (sum, count) = self.cross_entropy_label_smoothed_sum(logits, targets, epsilon, pad_id)?;
        self.scale(sum, 1.0 / count as f64)
    }
}

