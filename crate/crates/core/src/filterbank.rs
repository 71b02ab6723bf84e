//! SRM high-pass residual kernels, their five functional groups, and the
//! residual views derived from them.
//!
//! Each kernel predicts a pixel from its neighbourhood and subtracts the
//! pixel itself. Kernel responses are cross-correlations evaluated with
//! reflective padding, divided by the kernel's quantization constant, and
//! applied to every channel independently. A group's view is the mean of
//! its kernels' responses.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{reflect, Image};

pub const KERNEL_SIZE: usize = 5;
pub const NUM_KERNELS: usize = 30;
pub const NUM_GROUPS: usize = 5;
/// Number of views produced per image: five filtered plus the original.
pub const NUM_VIEWS: usize = 6;

const BUILTIN_KERNELS: &str = include_str!("../data/srm_kernels.txt");
const CENTER: usize = KERNEL_SIZE / 2;

const GROUP_TABLE: [(u8, std::ops::RangeInclusive<u8>, &str); NUM_GROUPS] = [
    (1, 1..=8, "simple edge detection: first-order horizontal, vertical and diagonal differences"),
    (2, 9..=12, "stronger weight variations for prominent edges: second-order differences"),
    (3, 13..=20, "multi-level edges and curved structures: third-order differences"),
    (4, 21..=25, "coarse edges and contours: 3x3 SQUARE and EDGE kernels"),
    (5, 26..=30, "high-order edges and fine texture: 5x5 SQUARE and EDGE kernels"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel {
    id: u8,
    weights: [[f64; KERNEL_SIZE]; KERNEL_SIZE],
    normalizer: f64,
}

impl FilterKernel {
    /// Validates the zero-sum and positive-normalizer invariants.
    pub fn new(id: u8, weights: [[f64; KERNEL_SIZE]; KERNEL_SIZE], normalizer: f64) -> Result<Self> {
        let invariant = |reason: String| Error::KernelInvariant {
            id: u32::from(id),
            reason,
        };
        if weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(invariant("non-finite weight".into()));
        }
        if !(normalizer.is_finite() && normalizer > 0.0) {
            return Err(invariant(format!("normalizer must be positive, got {normalizer}")));
        }
        let sum: f64 = weights.iter().flatten().sum();
        let scale: f64 = weights.iter().flatten().map(|w| w.abs()).sum::<f64>().max(1.0);
        if sum.abs() > 1e-12 * scale {
            return Err(invariant(format!("weights sum to {sum}, expected 0")));
        }
        Ok(Self {
            id,
            weights,
            normalizer,
        })
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn weights(&self) -> &[[f64; KERNEL_SIZE]; KERNEL_SIZE] {
        &self.weights
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Non-centre taps as `(dy, dx, weight / normalizer)`.
    fn taps(&self) -> Vec<(isize, isize, f64)> {
        let mut taps = Vec::new();
        for (u, row) in self.weights.iter().enumerate() {
            for (v, &w) in row.iter().enumerate() {
                if w != 0.0 && (u, v) != (CENTER, CENTER) {
                    taps.push((
                        u as isize - CENTER as isize,
                        v as isize - CENTER as isize,
                        w / self.normalizer,
                    ));
                }
            }
        }
        taps
    }
}

impl fmt::Display for FilterKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.weights {
            let cells: Vec<String> = row.iter().map(|w| format!("{w:>4}")).collect();
            writeln!(f, "[{} ]", cells.join(" "))?;
        }
        write!(f, "normalizer q = {}", self.normalizer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterGroup {
    pub group_id: u8,
    pub kernel_ids: Vec<u8>,
    pub description: String,
}

impl FilterGroup {
    /// The fixed five-group partition of kernel ids 1..=30.
    pub fn all() -> Vec<FilterGroup> {
        GROUP_TABLE
            .iter()
            .map(|(group_id, ids, description)| FilterGroup {
                group_id: *group_id,
                kernel_ids: ids.clone().collect(),
                description: (*description).to_string(),
            })
            .collect()
    }

    pub fn by_id(group_id: u8) -> Option<FilterGroup> {
        Self::all().into_iter().find(|g| g.group_id == group_id)
    }

    /// Group that kernel `kernel_id` belongs to.
    pub fn containing(kernel_id: u8) -> Option<FilterGroup> {
        Self::all()
            .into_iter()
            .find(|g| g.kernel_ids.contains(&kernel_id))
    }
}

/// The 30-kernel bank, ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    kernels: Vec<FilterKernel>,
}

impl FilterBank {
    /// The bank shipped in `data/srm_kernels.txt`.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_KERNELS).expect("shipped kernel file is valid")
    }

    pub fn builtin_text() -> &'static str {
        BUILTIN_KERNELS
    }

    /// Parses the text kernel format: one record per line holding the id,
    /// 25 row-major weights and the normalizer. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kernels = Vec::with_capacity(NUM_KERNELS);
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let expected = 2 + KERNEL_SIZE * KERNEL_SIZE;
            if fields.len() != expected {
                return Err(Error::KernelManifest(format!(
                    "line {}: expected {expected} fields, found {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let id: u8 = fields[0].parse().map_err(|_| {
                Error::KernelManifest(format!("line {}: bad kernel id `{}`", lineno + 1, fields[0]))
            })?;
            if !(1..=NUM_KERNELS as u8).contains(&id) {
                return Err(Error::KernelManifest(format!(
                    "line {}: kernel id {id} outside 1..={NUM_KERNELS}",
                    lineno + 1
                )));
            }
            if !seen.insert(id) {
                return Err(Error::KernelManifest(format!("duplicate kernel id {id}")));
            }
            let mut nums = Vec::with_capacity(expected - 1);
            for tok in &fields[1..] {
                let v: f64 = tok.parse().map_err(|_| {
                    Error::KernelManifest(format!("line {}: bad number `{tok}`", lineno + 1))
                })?;
                nums.push(v);
            }
            let mut weights = [[0.0; KERNEL_SIZE]; KERNEL_SIZE];
            for (i, w) in nums[..KERNEL_SIZE * KERNEL_SIZE].iter().enumerate() {
                weights[i / KERNEL_SIZE][i % KERNEL_SIZE] = *w;
            }
            kernels.push(FilterKernel::new(id, weights, nums[KERNEL_SIZE * KERNEL_SIZE])?);
        }
        if kernels.len() != NUM_KERNELS {
            let missing: Vec<String> = (1..=NUM_KERNELS as u8)
                .filter(|id| !seen.contains(id))
                .map(|id| id.to_string())
                .collect();
            return Err(Error::KernelManifest(format!(
                "expected {NUM_KERNELS} kernels, found {} (missing ids: {})",
                kernels.len(),
                missing.join(", ")
            )));
        }
        kernels.sort_by_key(|k| k.id);
        Ok(Self { kernels })
    }

    /// Serializes back to the text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# id, 25 row-major weights, normalizer\n");
        for k in &self.kernels {
            let ws: Vec<String> = k.weights.iter().flatten().map(|w| w.to_string()).collect();
            out.push_str(&format!("{} {} {}\n", k.id, ws.join(" "), k.normalizer));
        }
        out
    }

    pub fn kernels(&self) -> &[FilterKernel] {
        &self.kernels
    }

    pub fn kernel(&self, id: u8) -> Option<&FilterKernel> {
        self.kernels.iter().find(|k| k.id == id)
    }
}

/// Reads a kernel data file.
pub fn load_kernels(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FilterBank::parse(&text)
}

/// Where a view came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewSource {
    Group(u8),
    Original,
}

impl ViewSource {
    /// Expert index serving this view: groups 1..=5 map to themselves, the
    /// original image to expert 6.
    pub fn expert(self) -> usize {
        match self {
            ViewSource::Group(g) => usize::from(g),
            ViewSource::Original => NUM_VIEWS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualView {
    pub source: ViewSource,
    pub pixels: Image,
}

/// Kernel response `sum_t (w_t / q) * x_t` for every pixel and channel.
///
/// The sum is evaluated as `sum_{t != centre} (w_t / q) * (x_t - x_centre)`,
/// which equals the plain correlation because the weights sum to zero and
/// makes constant images map to exactly zero.
pub fn apply_kernel(image: &Image, kernel: &FilterKernel) -> Result<Image> {
    image.ensure_valid()?;
    let taps = kernel.taps();
    let (h, w, c) = image.dim();
    let src = image.data();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let center = src[[y, x, ch]];
                let mut acc = 0.0;
                for &(dy, dx, wq) in &taps {
                    let yy = reflect(y as isize + dy, h);
                    let xx = reflect(x as isize + dx, w);
                    acc += wq * (src[[yy, xx, ch]] - center);
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    Ok(Image::new(out))
}

/// Mean of the group's per-kernel residuals.
pub fn group_residual(image: &Image, group: &FilterGroup, bank: &FilterBank) -> Result<ResidualView> {
    let kernels = group
        .kernel_ids
        .iter()
        .map(|&id| {
            bank.kernel(id).ok_or(Error::GroupResolution {
                group: group.group_id,
                kernel_id: id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if kernels.is_empty() {
        return Err(Error::KernelManifest(format!("group {} has no kernels", group.group_id)));
    }
    let (h, w, c) = image.dim();
    let mut sum = Array3::zeros((h, w, c));
    for kernel in &kernels {
        sum += apply_kernel(image, kernel)?.data();
    }
    sum /= kernels.len() as f64;
    Ok(ResidualView {
        source: ViewSource::Group(group.group_id),
        pixels: Image::new(sum),
    })
}

/// The six views of an image: groups 1..=5 followed by the unmodified original.
pub fn make_views(image: &Image, bank: &FilterBank) -> Result<Vec<ResidualView>> {
    image.ensure_valid()?;
    let mut views = FilterGroup::all()
        .iter()
        .map(|g| group_residual(image, g, bank))
        .collect::<Result<Vec<_>>>()?;
    views.push(ResidualView {
        source: ViewSource::Original,
        pixels: image.clone(),
    });
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_bank_has_thirty_kernels_with_negative_unit_centre() {
        let bank = FilterBank::builtin();
        assert_eq!(bank.kernels().len(), NUM_KERNELS);
        for (i, k) in bank.kernels().iter().enumerate() {
            assert_eq!(usize::from(k.id()), i + 1);
            assert_eq!(k.weights()[CENTER][CENTER] / k.normalizer(), -1.0);
        }
    }

    #[test]
    fn groups_partition_all_kernels() {
        let groups = FilterGroup::all();
        let mut all: Vec<u8> = groups.iter().flat_map(|g| g.kernel_ids.clone()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(n, NUM_KERNELS);
        assert_eq!(all, (1..=30).collect::<Vec<u8>>());
        let sizes: Vec<usize> = groups.iter().map(|g| g.kernel_ids.len()).collect();
        assert_eq!(sizes, vec![8, 4, 8, 5, 5]);
    }

    #[test]
    fn text_roundtrip() {
        let bank = FilterBank::builtin();
        assert_eq!(FilterBank::parse(&bank.to_text()).unwrap(), bank);
    }

    #[test]
    fn missing_kernel_is_manifest_error() {
        let text: String = FilterBank::builtin()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("30 "))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = FilterBank::parse(&text).unwrap_err();
        assert_eq!(err.kind(), "kernel-manifest");
        assert!(err.to_string().contains("30"));
    }

    #[test]
    fn duplicate_kernel_is_manifest_error() {
        let mut text = FilterBank::builtin().to_text();
        let first = text.lines().nth(1).unwrap().to_string();
        text.push_str(&first);
        text.push('\n');
        assert_eq!(FilterBank::parse(&text).unwrap_err().kind(), "kernel-manifest");
    }

    #[test]
    fn nonzero_sum_is_invariant_error_naming_id() {
        let text: String = FilterBank::builtin()
            .to_text()
            .lines()
            .map(|l| {
                if l.starts_with("7 ") {
                    // bump the first weight so the kernel sums to 1
                    let mut f: Vec<String> = l.split_whitespace().map(String::from).collect();
                    let v: f64 = f[1].parse().unwrap();
                    f[1] = (v + 1.0).to_string();
                    f.join(" ") + "\n"
                } else {
                    format!("{l}\n")
                }
            })
            .collect();
        match FilterBank::parse(&text).unwrap_err() {
            Error::KernelInvariant { id, .. } => assert_eq!(id, 7),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn non_finite_image_is_rejected() {
        let mut img = Image::filled(6, 6, 3, 0.5);
        img.data_mut()[[2, 3, 1]] = f64::NAN;
        let bank = FilterBank::builtin();
        let err = apply_kernel(&img, bank.kernel(1).unwrap()).unwrap_err();
        assert_eq!(err.kind(), "invalid-image");
    }

    #[test]
    fn dangling_group_kernel_is_resolution_error() {
        let bank = FilterBank::builtin();
        let group = FilterGroup {
            group_id: 9,
            kernel_ids: vec![1, 31],
            description: String::new(),
        };
        let err = group_residual(&Image::filled(5, 5, 1, 0.1), &group, &bank).unwrap_err();
        assert_eq!(err.kind(), "group-resolution");
    }

    #[test]
    fn mean_of_two_kernels() {
        // kernel a: 2 * (right - centre), kernel b: 4 * (right - centre);
        // on a horizontal ramp with unit slope they respond 2 and 4.
        let mut wa = [[0.0; 5]; 5];
        wa[2][2] = -2.0;
        wa[2][3] = 2.0;
        let mut wb = [[0.0; 5]; 5];
        wb[2][2] = -4.0;
        wb[2][3] = 4.0;
        let mut kernels = FilterBank::builtin().kernels;
        kernels[0] = FilterKernel::new(1, wa, 1.0).unwrap();
        kernels[1] = FilterKernel::new(2, wb, 1.0).unwrap();
        let bank = FilterBank { kernels };
        let group = FilterGroup {
            group_id: 1,
            kernel_ids: vec![1, 2],
            description: String::new(),
        };
        let ramp = Image::from_fn(5, 7, 1, |(_, x, _)| x as f64);
        let view = group_residual(&ramp, &group, &bank).unwrap();
        assert_eq!(view.pixels.get(2, 3, 0), 3.0);
    }

    #[test]
    fn views_are_ordered_with_original_last() {
        let img = Image::from_fn(9, 9, 3, |(y, x, c)| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
        let views = make_views(&img, &FilterBank::builtin()).unwrap();
        assert_eq!(views.len(), NUM_VIEWS);
        for (i, v) in views.iter().take(5).enumerate() {
            assert_eq!(v.source, ViewSource::Group(i as u8 + 1));
            assert_eq!(v.source.expert(), i + 1);
        }
        assert_eq!(views[5].source, ViewSource::Original);
        assert_eq!(views[5].pixels, img);
    }
}
