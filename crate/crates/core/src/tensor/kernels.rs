// Plain loops over flat slices. Inner loops are written so LLVM can
// vectorize them without fast-math (no reassociated reductions except the
// explicit 8-lane accumulators in `dot`).

use super::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[Real], b: &[Real], c: &mut [Real]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    let mut acc = [0.0 as Real; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<Real>() + tail
}

/// How the smaller operand of a broadcast binary op is indexed from the
/// output's flat index.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Small operand equals the trailing dims of the output: `i % n`.
    Suffix(usize),
    /// Small operand equals the leading dims, trailing dims are 1: `i / inner`.
    Prefix(usize),
    General(Vec<usize>),
}

impl Broadcast {
    /// Mapping for `small` broadcast up to `big` (numpy rules, one direction
    /// only). `None` if the shapes are incompatible.
    pub(crate) fn plan(big: &[usize], small: &[usize]) -> Option<Broadcast> {
        if big == small {
            return Some(Broadcast::Same);
        }
        let small_numel: usize = small.iter().product();
        if small_numel == 1 {
            return Some(Broadcast::Scalar);
        }
        if small.len() > big.len() {
            return None;
        }
        let pad = big.len() - small.len();
        let mut aligned = vec![1usize; pad];
        aligned.extend_from_slice(small);
        for (&s, &b) in aligned.iter().zip(big) {
            if s != 1 && s != b {
                return None;
            }
        }
        // Suffix: leading dims are all broadcast, trailing dims all match.
        if let Some(first_real) = aligned.iter().position(|&s| s != 1) {
            if aligned[first_real..] == big[first_real..] {
                return Some(Broadcast::Suffix(small_numel));
            }
        }
        // Prefix: leading dims match, trailing dims are all 1.
        if let Some(last_real) = aligned.iter().rposition(|&s| s != 1) {
            if aligned[..=last_real] == big[..=last_real] {
                let inner = big[last_real + 1..].iter().product();
                return Some(Broadcast::Prefix(inner));
            }
        }
        let mut strides = vec![0usize; big.len()];
        let mut acc = 1;
        for d in (0..big.len()).rev() {
            if aligned[d] != 1 {
                strides[d] = acc;
                acc *= aligned[d];
            }
        }
        let numel: usize = big.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut idx = vec![0usize; big.len()];
        for _ in 0..numel {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..big.len()).rev() {
                idx[d] += 1;
                if idx[d] < big[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Some(Broadcast::General(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Prefix(inner) => i / inner,
            Broadcast::General(map) => map[i],
        }
    }
}
