use super::{gemm, MatRef, Result, Scalar, Tensor, TensorError};

/// Sweep cap for the cyclic Jacobi solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Convergence threshold: off-diagonal Frobenius norm relative to `‖M‖_F`.
pub const JACOBI_REL_TOL: f64 = 1e-12;
const SYMMETRY_REL_TOL: f64 = 1e-6;

/// Eigen-decomposition `M = U diag(values) Uᵀ`, values sorted descending and
/// the columns of `vectors` holding the matching eigenvectors.
#[derive(Debug, Clone)]
pub struct SymEig<T: Scalar> {
    pub vectors: Tensor<T>,
    pub values: Tensor<T>,
    pub sweeps: usize,
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Input symmetry is checked to `1e-6` relative to the largest entry and the
/// matrix is symmetrised before iterating.
pub fn sym_eig<T: Scalar>(m: &Tensor<T>) -> Result<SymEig<T>> {
    let (n, cols) = m.dims2()?;
    if n != cols {
        return Err(TensorError::ShapeMismatch {
            op: "sym_eig",
            left: vec![n, cols],
            right: vec![cols, n],
        });
    }
    let data = m.data();
    let scale = m.max_abs().as_f64();
    for i in 0..n {
        for j in (i + 1)..n {
            let gap = (data[i * n + j] - data[j * n + i]).abs().as_f64();
            if gap > SYMMETRY_REL_TOL * scale {
                return Err(TensorError::NotSymmetric { row: i, col: j, gap });
            }
        }
    }

    let half = T::of(0.5);
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = half * (data[i * n + j] + data[j * n + i]);
        }
    }
    // Rows of `w` are eigenvectors (w = Uᵀ) so rotations touch contiguous memory.
    let mut w = vec![T::zero(); n * n];
    for i in 0..n {
        w[i * n + i] = T::one();
    }

    let total = a.iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
    let target = JACOBI_REL_TOL * total;
    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a, n);
        if off <= target || total == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(TensorError::NoConvergence { sweeps, off });
        }
        sweeps += 1;
        // Entries already below the global target are skipped; they cannot
        // move the off-diagonal norm above it on their own.
        let skip = T::of(target / (n as f64));
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= skip {
                    continue;
                }
                rotate(&mut a, &mut w, n, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[j * n + j]
            .partial_cmp(&a[i * n + i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vectors = vec![T::zero(); n * n];
    let mut values = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        values.push(a[src * n + src]);
        for row in 0..n {
            vectors[row * n + col] = w[src * n + row];
        }
    }
    Ok(SymEig {
        vectors: Tensor::new(vec![n, n], vectors)?,
        values: Tensor::new(vec![n], values)?,
        sweeps,
    })
}

fn off_diagonal_norm<T: Scalar>(a: &[T], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = a[i * n + j].as_f64();
                acc += v * v;
            }
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation zeroing `a[p][q]`, applied as `Jᵀ A J` and `W <- Jᵀ W`.
fn rotate<T: Scalar>(a: &mut [T], w: &mut [T], n: usize, p: usize, q: usize) {
    let app = a[p * n + p];
    let aqq = a[q * n + q];
    let apq = a[p * n + q];
    let theta = (aqq - app) / (T::of(2.0) * apq);
    let t = {
        let t = T::one() / (theta.abs() + (theta * theta + T::one()).sqrt());
        if theta < T::zero() {
            -t
        } else {
            t
        }
    };
    let c = T::one() / (t * t + T::one()).sqrt();
    let s = t * c;

    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[p * n + k];
        let akq = a[q * n + k];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        a[p * n + k] = new_p;
        a[q * n + k] = new_q;
        a[k * n + p] = new_p;
        a[k * n + q] = new_q;
    }
    a[p * n + p] = app - t * apq;
    a[q * n + q] = aqq + t * apq;
    a[p * n + q] = T::zero();
    a[q * n + p] = T::zero();

    let (head, tail) = w.split_at_mut(q * n);
    let wp = &mut head[p * n..p * n + n];
    let wq = &mut tail[..n];
    for (x, y) in wp.iter_mut().zip(wq.iter_mut()) {
        let (vp, vq) = (*x, *y);
        *x = c * vp - s * vq;
        *y = s * vp + c * vq;
    }
}

/// Applies `A ⊗ B` to `vec(C)` without forming the Kronecker product.
///
/// `a` is `p×p`, `b` is `q×q`, `c` is `q×p`, and `vec` stacks columns. The
/// result is the `q×p` matrix `B·C·Aᵀ`, whose `vec` equals `(A ⊗ B)·vec(C)`;
/// for symmetric factors this is `Bᵀ·C·A`.
pub fn kron_apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, p2) = a.dims2()?;
    let (q, q2) = b.dims2()?;
    let (cq, cp) = c.dims2()?;
    if p != p2 || q != q2 || cq != q || cp != p {
        return Err(TensorError::ShapeMismatch {
            op: "kron_apply",
            left: vec![p, p2, q, q2],
            right: c.shape().to_vec(),
        });
    }
    let mut bc = vec![T::zero(); q * p];
    gemm(T::one(), MatRef::new(b.data(), q, q), MatRef::new(c.data(), q, p), T::zero(), &mut bc);
    let mut out = vec![T::zero(); q * p];
    gemm(T::one(), MatRef::new(&bc, q, p), MatRef::new(a.data(), p, p).t(), T::zero(), &mut out);
    let out = Tensor::from_parts(vec![q, p], out);
    out.check_finite("kron_apply")?;
    Ok(out)
}
