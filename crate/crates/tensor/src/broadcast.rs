//! Numpy-style broadcasting for binary elementwise primitives.

/// Maps a flat output index to a flat input index.
pub(crate) enum Bcast {
    Same,
    Modulo(usize),
    Map(Vec<usize>),
}

impl Bcast {
    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Modulo(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Index plan for reading an input of shape `input` broadcast to `out`.
pub(crate) fn plan(out: &[usize], input: &[usize]) -> Bcast {
    let n_out: usize = out.iter().product();
    let n_in: usize = input.iter().product();
    if n_in == n_out {
        return Bcast::Same;
    }
    let nd = out.len();
    let offset = nd - input.len();
    // input equal to a trailing block of `out` (leading dims broadcast)
    let first_real = input.iter().position(|&d| d != 1).unwrap_or(input.len());
    if input[first_real..] == out[offset + first_real..] {
        return Bcast::Modulo(n_in.max(1));
    }
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[offset + i] = acc;
        }
        acc *= input[i];
    }
    let mut map = Vec::with_capacity(n_out);
    let mut counter = vec![0usize; nd];
    let mut idx = 0usize;
    for _ in 0..n_out {
        map.push(idx);
        for d in (0..nd).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    Bcast::Map(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn column_broadcast_map() {
        let p = plan(&[2, 3], &[2, 1]);
        let got: Vec<usize> = (0..6).map(|i| p.index(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
        let p = plan(&[2, 3], &[1, 3]);
        let got: Vec<usize> = (0..6).map(|i| p.index(i)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2]);
        let p = plan(&[2, 2, 3], &[2, 1, 3]);
        let got: Vec<usize> = (0..12).map(|i| p.index(i)).collect();
        assert_eq!(got, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }
}
