/// Sparse row-mixing matrix in CSR form.
///
/// Output row `i` of a mix is `sum_k w_k * src[row_k]` over the entries of row
/// `i`. Gathers, bilinear sampling and inverse-distance interpolation are all
/// expressed this way so they share one differentiable op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(rows: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        Self {
            offsets,
            entries: Vec::with_capacity(entries),
        }
    }

    /// Plain row gather: output row `i` copies `src[indices[i]]`.
    pub fn gather(indices: &[usize]) -> Self {
        let mut table = Self::with_capacity(indices.len(), indices.len());
        for &i in indices {
            table.push_row([(i, 1.0)]);
        }
        table
    }

    pub fn push_row(&mut self, row: impl IntoIterator<Item = (usize, f64)>) {
        self.entries.extend(row);
        self.offsets.push(self.entries.len());
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_source_row(&self) -> Option<usize> {
        self.entries.iter().map(|&(r, _)| r).max()
    }

    /// Value-level mix of a row-major `n x c` matrix.
    pub fn apply(&self, src: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_rows() * c];
        for (i, dst) in out.chunks_exact_mut(c.max(1)).enumerate().take(self.num_rows()) {
            for &(r, w) in self.row(i) {
                dst.iter_mut()
                    .zip(&src[r * c..(r + 1) * c])
                    .for_each(|(d, x)| *d += w * x);
            }
        }
        out
    }
}
