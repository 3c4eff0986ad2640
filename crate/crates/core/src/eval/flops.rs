use serde::{Deserialize, Serialize};

/// Analytical FLOPs of the voxel consistency loss (one per compared feature
/// element) and of the relation loss (three length-`c` dot products per pair
/// at `2c` each). The relation count is 0 when `with_relation` is false.
pub fn flops_voxel_distill(v: u64, c: u64, with_relation: bool) -> (u64, u64) {
    let cons = v * c;
    let rel = if with_relation { 6 * c * v * v } else { 0 };
    (cons, rel)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub voxels: u64,
    pub channels: u64,
    pub cons: u64,
    pub rel: u64,
}

impl FlopsRow {
    /// `voxels,channels,cons,rel` with the counts in 3-significant-figure
    /// scientific notation.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.voxels,
            self.channels,
            sci3(self.cons as f64),
            sci3(self.rel as f64)
        )
    }
}

pub fn flops_report(voxel_counts: &[u64], channels: u64) -> Vec<FlopsRow> {
    voxel_counts
        .iter()
        .map(|&v| {
            let (cons, rel) = flops_voxel_distill(v, channels, true);
            FlopsRow {
                voxels: v,
                channels,
                cons,
                rel,
            }
        })
        .collect()
}

/// `1.98e6`-style rendering with three significant figures.
pub fn sci3(x: f64) -> String {
    if x == 0.0 {
        return "0.00e0".into();
    }
    let s = format!("{x:.2e}");
    s.replace("e+", "e")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_and_zero() {
        assert_eq!(flops_voxel_distill(0, 256, true), (0, 0));
        assert_eq!(flops_voxel_distill(1, 7, true), (7, 42));
        assert_eq!(flops_voxel_distill(10, 7, false), (70, 0));
        assert!(flops_report(&[], 256).is_empty());
    }

    #[test]
    fn formatting() {
        assert_eq!(sci3(1_975_808.0), "1.98e6");
        assert_eq!(sci3(91_495_716_864.0), "9.15e10");
        assert_eq!(sci3(0.0), "0.00e0");
    }
}
