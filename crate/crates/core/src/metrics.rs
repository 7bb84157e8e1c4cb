//! Storage and rank accounting shared by all methods.

pub const BYTES_PER_ENTRY: u64 = 8;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatrixMetrics {
    pub n: usize,
    /// Scalars kept after the offline stage (or by a non-parametric method).
    pub storage_entries: u64,
    /// Scalars of the instantiated near field.
    pub nf_entries: u64,
    /// Scalars of the instantiated far field.
    pub ff_entries: u64,
    /// Coupling matrices of an H2 format; `None` otherwise.
    pub coupling_entries: Option<u64>,
    /// Mean over far blocks of the larger far-field rank.
    pub rank: f64,
    pub c_sp: usize,
    /// Distinct coupling tensors (translation classes).
    pub m_a: usize,
    pub n_far: usize,
    pub n_near: usize,
}

impl MatrixMetrics {
    fn n2(&self) -> f64 {
        (self.n as f64) * (self.n as f64)
    }

    pub fn storage_gb(&self) -> f64 {
        (self.storage_entries * BYTES_PER_ENTRY) as f64 / 1e9
    }

    pub fn nf_ratio(&self) -> f64 {
        self.nf_entries as f64 / self.n2()
    }

    pub fn ff_ratio(&self) -> f64 {
        self.ff_entries as f64 / self.n2()
    }

    pub fn coupling_ratio(&self) -> Option<f64> {
        self.coupling_entries.map(|c| c as f64 / self.n2())
    }
}

/// Mean of a rank list, 0 for an empty far field.
pub fn mean_rank(ranks: impl Iterator<Item = usize>) -> f64 {
    let (mut s, mut c) = (0usize, 0usize);
    for r in ranks {
        s += r;
        c += 1;
    }
    if c == 0 {
        0.0
    } else {
        s as f64 / c as f64
    }
}
