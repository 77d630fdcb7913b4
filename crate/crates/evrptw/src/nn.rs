//! Minimal reverse-mode automatic differentiation over small dense f64
//! matrices. The policy and value networks are tiny at desk scale, so a
//! tape of boxed matrices is fast enough and keeps the gradient path
//! fully checkable against finite differences.

/// Large negative logit used for hard masking; exp() underflows to an
/// exact 0 probability without producing NaNs in backward passes.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Mat {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn row(data: Vec<f64>) -> Mat {
        Mat { rows: 1, cols: data.len(), data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * out.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Adds a constant matrix (masks, biases that carry no gradient).
    AddConst(Var),
    /// Row vector broadcast over all rows.
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// Column vector broadcast over all columns.
    MulCol(Var, Var),
    /// Constant matrix scaled by a learnable 1x1 scalar.
    ConstTimesScalar(Mat, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Var, Var),
    MeanRows(Var),
    SumAll(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Row-wise layer normalisation (no affine; apply MulRow/AddRow after).
    LayerNormRows(Var, Vec<f64>, Vec<f64>),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, f64, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(Mat::scalar(v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x + y).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x - y).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(ma.rows, ma.cols, ma.data.iter().map(|x| x * k).collect());
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(ma.rows, ma.cols, ma.data.iter().map(|x| x + k).collect());
        self.push(v, Op::AddScalar(a))
    }

    pub fn add_const(&mut self, a: Var, m: Mat) -> Var {
        let ma = self.value(a);
        assert_eq!((ma.rows, ma.cols), (m.rows, m.cols));
        let data = ma.data.iter().zip(&m.data).map(|(x, y)| x + y).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::AddConst(a))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] += mr.data[j];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ma, mr) = (self.value(a), self.value(row));
        assert_eq!(mr.rows, 1);
        assert_eq!(ma.cols, mr.cols);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] *= mr.data[j];
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ma, mc) = (self.value(a), self.value(col));
        assert_eq!(mc.cols, 1);
        assert_eq!(ma.rows, mc.rows);
        let mut v = ma.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                v.data[i * v.cols + j] *= mc.data[i];
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn const_times_scalar(&mut self, m: Mat, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = Mat::from_vec(m.rows, m.cols, m.data.iter().map(|x| x * sv).collect());
        self.push(v, Op::ConstTimesScalar(m, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(ma.rows, ma.cols, ma.data.iter().map(|x| x.tanh()).collect());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(
            ma.rows,
            ma.cols,
            ma.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(ma.rows, ma.cols, ma.data.iter().map(|x| x.max(0.0)).collect());
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(ma.rows, ma.cols, ma.data.iter().map(|x| x.exp()).collect());
        self.push(v, Op::Exp(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, len);
        for i in 0..ma.rows {
            for j in 0..len {
                v.set(i, j, ma.get(i, start + j));
            }
        }
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(len, ma.cols);
        for i in 0..len {
            for j in 0..ma.cols {
                v.set(i, j, ma.get(start + i, j));
            }
        }
        self.push(v, Op::SliceRows(a, start, len))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows, mb.rows);
        let mut v = Mat::zeros(ma.rows, ma.cols + mb.cols);
        for i in 0..ma.rows {
            for j in 0..ma.cols {
                v.set(i, j, ma.get(i, j));
            }
            for j in 0..mb.cols {
                v.set(i, ma.cols + j, mb.get(i, j));
            }
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_cols_many(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.concat_cols(acc, v);
        }
        acc
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(1, ma.cols);
        for j in 0..ma.cols {
            let mut s = 0.0;
            for i in 0..ma.rows {
                s += ma.get(i, j);
            }
            v.data[j] = s / ma.rows as f64;
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, ma.cols);
        for i in 0..ma.rows {
            let row = &ma.data[i * ma.cols..(i + 1) * ma.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..ma.cols {
                let e = (row[j] - mx).exp();
                v.set(i, j, e);
                z += e;
            }
            for j in 0..ma.cols {
                let e = v.get(i, j) / z;
                v.set(i, j, e);
            }
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, ma.cols);
        for i in 0..ma.rows {
            let row = &ma.data[i * ma.cols..(i + 1) * ma.cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = mx + z.ln();
            for j in 0..ma.cols {
                v.set(i, j, row[j] - lz);
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let ma = self.value(a);
        let mut v = Mat::zeros(ma.rows, ma.cols);
        let mut xhat = vec![0.0; ma.data.len()];
        let mut inv_std = vec![0.0; ma.rows];
        for i in 0..ma.rows {
            let row = &ma.data[i * ma.cols..(i + 1) * ma.cols];
            let mean = row.iter().sum::<f64>() / ma.cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / ma.cols as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..ma.cols {
                let h = (row[j] - mean) * istd;
                xhat[i * ma.cols + j] = h;
                v.set(i, j, h);
            }
        }
        self.push(v, Op::LayerNormRows(a, xhat, inv_std))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x.min(*y)).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::Min(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!((ma.rows, ma.cols), (mb.rows, mb.cols));
        let data = ma.data.iter().zip(&mb.data).map(|(x, y)| x.max(*y)).collect();
        let v = Mat::from_vec(ma.rows, ma.cols, data);
        self.push(v, Op::Max(a, b))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let ma = self.value(a);
        let v = Mat::from_vec(
            ma.rows,
            ma.cols,
            ma.data.iter().map(|x| x.clamp(lo, hi)).collect(),
        );
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Reverse pass from a scalar loss. Returns accumulated gradients for
    /// every node; leaves of interest are read out by the caller.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.data.len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Mat::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = g.matmul(&mb.transpose());
                    let gb = ma.transpose().matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| -x).collect());
                    accumulate(&mut grads, *b, neg);
                }
                Op::MulElem(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&mb.data).map(|(x, y)| x * y).collect(),
                    );
                    let gb = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&ma.data).map(|(x, y)| x * y).collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => {
                    let ga =
                        Mat::from_vec(g.rows, g.cols, g.data.iter().map(|x| x * k).collect());
                    accumulate(&mut grads, *a, ga);
                }
                Op::AddScalar(a) | Op::AddConst(a) => {
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, g.clone());
                    let mut gr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gr.data[j] += g.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let (ma, mr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    let mut gr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            ga.set(i, j, g.get(i, j) * mr.data[j]);
                            gr.data[j] += g.get(i, j) * ma.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let (ma, mc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    let mut gc = Mat::zeros(g.rows, 1);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            ga.set(i, j, g.get(i, j) * mc.data[i]);
                            gc.data[i] += g.get(i, j) * ma.get(i, j);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *col, gc);
                }
                Op::ConstTimesScalar(m, s) => {
                    let gs: f64 = g.data.iter().zip(&m.data).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *s, Mat::scalar(gs));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(x, t)| x * (1.0 - t * t)).collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&y.data)
                            .map(|(x, s)| x * s * (1.0 - s))
                            .collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ma = &self.nodes[a.0].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&ma.data)
                            .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&y.data).map(|(x, e)| x * e).collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::SliceCols(a, start, len) => {
                    let ma = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(ma.rows, ma.cols);
                    for i in 0..g.rows {
                        for j in 0..*len {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, len) => {
                    let ma = &self.nodes[a.0].value;
                    let mut ga = Mat::zeros(ma.rows, ma.cols);
                    for i in 0..*len {
                        for j in 0..g.cols {
                            ga.set(start + i, j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Mat::zeros(ma.rows, ma.cols);
                    let mut gb = Mat::zeros(mb.rows, mb.cols);
                    for i in 0..g.rows {
                        for j in 0..ma.cols {
                            ga.set(i, j, g.get(i, j));
                        }
                        for j in 0..mb.cols {
                            gb.set(i, j, g.get(i, ma.cols + j));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MeanRows(a) => {
                    let ma = &self.nodes[a.0].value;
                    let scale = 1.0 / ma.rows as f64;
                    let mut ga = Mat::zeros(ma.rows, ma.cols);
                    for i in 0..ma.rows {
                        for j in 0..ma.cols {
                            ga.set(i, j, g.data[j] * scale);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let ma = &self.nodes[a.0].value;
                    let gv = g.item();
                    accumulate(
                        &mut grads,
                        *a,
                        Mat::from_vec(ma.rows, ma.cols, vec![gv; ma.data.len()]),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let mut dot = 0.0;
                        for j in 0..g.cols {
                            dot += g.get(i, j) * y.get(i, j);
                        }
                        for j in 0..g.cols {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let gsum: f64 = (0..g.cols).map(|j| g.get(i, j)).sum();
                        for j in 0..g.cols {
                            let p = y.get(i, j).exp();
                            ga.set(i, j, g.get(i, j) - p * gsum);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, xhat, inv_std) => {
                    let cols = g.cols;
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let mut gmean = 0.0;
                        let mut gxhat = 0.0;
                        for j in 0..cols {
                            gmean += g.get(i, j);
                            gxhat += g.get(i, j) * xhat[i * cols + j];
                        }
                        gmean /= cols as f64;
                        gxhat /= cols as f64;
                        for j in 0..cols {
                            let v = inv_std[i]
                                * (g.get(i, j) - gmean - xhat[i * cols + j] * gxhat);
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let take_min = matches!(node.op, Op::Min(_, _));
                    let (ma, mb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let mut ga = Mat::zeros(g.rows, g.cols);
                    let mut gb = Mat::zeros(g.rows, g.cols);
                    for k in 0..g.data.len() {
                        let first = if take_min {
                            ma.data[k] <= mb.data[k]
                        } else {
                            ma.data[k] >= mb.data[k]
                        };
                        if first {
                            ga.data[k] = g.data[k];
                        } else {
                            gb.data[k] = g.data[k];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Clamp(a, lo, hi) => {
                    let ma = &self.nodes[a.0].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&ma.data)
                            .map(|(x, v)| if *v >= *lo && *v <= *hi { *x } else { 0.0 })
                            .collect(),
                    );
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(&g.data) {
                *a += b;
            }
        }
        slot => *slot = Some(g),
    }
}
