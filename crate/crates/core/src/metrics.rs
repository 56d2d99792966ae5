//! Overlap and surface-distance metrics for binary masks.
//!
//! Masks are flat `u8` buffers in C order with a 2-D `[H, W]` or 3-D
//! `[D, H, W]` shape. Surface voxels are foreground voxels with at least one
//! face neighbour that is background or outside the grid (4-connectivity in
//! 2-D, 6 in 3-D); distances are between voxel centres in millimetres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|P|`, `|R|`, `|P and R|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub pred: usize,
    pub reference: usize,
    pub overlap: usize,
}

impl Counts {
    pub fn of(pred: &[u8], reference: &[u8]) -> Result<Self> {
        if pred.len() != reference.len() {
            return Err(Error::Shape(format!("prediction has {} voxels, reference {}", pred.len(), reference.len())));
        }
        let mut c = Counts::default();
        for (&p, &r) in pred.iter().zip(reference) {
            let (p, r) = (p != 0, r != 0);
            c.pred += usize::from(p);
            c.reference += usize::from(r);
            c.overlap += usize::from(p && r);
        }
        Ok(c)
    }

    pub fn union(&self) -> usize {
        self.pred + self.reference - self.overlap
    }

    /// Dice; two empty masks agree perfectly.
    pub fn dice(&self) -> f64 {
        if self.pred + self.reference == 0 {
            1.0
        } else {
            2.0 * self.overlap as f64 / (self.pred + self.reference) as f64
        }
    }

    /// `1 - |P and R| / |P or R|`; two empty masks give 0.
    pub fn voe(&self) -> f64 {
        match self.union() {
            0 => 0.0,
            u => 1.0 - self.overlap as f64 / u as f64,
        }
    }

    /// Signed `(|P| - |R|) / |R|`.
    pub fn rvd(&self) -> Result<f64> {
        if self.reference == 0 {
            return Err(Error::UndefinedMetric("relative volume difference with an empty reference".into()));
        }
        Ok((self.pred as f64 - self.reference as f64) / self.reference as f64)
    }
}

pub fn dice_per_case(pred: &[u8], reference: &[u8]) -> Result<f64> {
    Ok(Counts::of(pred, reference)?.dice())
}

pub fn voe(pred: &[u8], reference: &[u8]) -> Result<f64> {
    Ok(Counts::of(pred, reference)?.voe())
}

pub fn rvd(pred: &[u8], reference: &[u8]) -> Result<f64> {
    Counts::of(pred, reference)?.rvd()
}

/// Dice over voxel counts pooled across cases.
pub fn dice_global(cases: &[Counts]) -> f64 {
    let overlap: usize = cases.iter().map(|c| c.overlap).sum();
    let total: usize = cases.iter().map(|c| c.pred + c.reference).sum();
    if total == 0 {
        1.0
    } else {
        2.0 * overlap as f64 / total as f64
    }
}

/// Grid geometry padded to 3-D. 2-D input gets a unit depth and no z faces;
/// a 3-D input with one slice keeps its (out-of-grid) z faces.
#[derive(Clone, Copy)]
struct Grid {
    shape: [usize; 3],
    spacing: [f64; 3],
    planar: bool,
}

fn dims(shape: &[usize], spacing: &[f64], len: usize) -> Result<Grid> {
    let (s, sp, planar) = match (shape, spacing) {
        ([h, w], [sy, sx]) => ([1, *h, *w], [1.0, *sy, *sx], true),
        ([d, h, w], [sz, sy, sx]) => ([*d, *h, *w], [*sz, *sy, *sx], false),
        _ => {
            return Err(Error::Shape(format!(
                "masks must be 2-D or 3-D with matching spacing, got shape {shape:?} and spacing {spacing:?}"
            )))
        }
    };
    if s.iter().product::<usize>() != len {
        return Err(Error::Shape(format!("shape {shape:?} does not match {len} voxels")));
    }
    if sp.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(Grid { shape: s, spacing: sp, planar })
}

fn boundary_flags(mask: &[u8], grid: Grid) -> Vec<bool> {
    let [d, h, w] = grid.shape;
    let fg = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x] != 0;
    let three_d = !grid.planar;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !fg(z, y, x) {
                    continue;
                }
                let open_y = y == 0 || y + 1 == h || !fg(z, y - 1, x) || !fg(z, y + 1, x);
                let open_x = x == 0 || x + 1 == w || !fg(z, y, x - 1) || !fg(z, y, x + 1);
                let open_z = three_d && (z == 0 || z + 1 == d || !fg(z - 1, y, x) || !fg(z + 1, y, x));
                out[(z * h + y) * w + x] = open_y || open_x || open_z;
            }
        }
    }
    out
}

/// Boundary voxel centres in millimetres, `[z, y, x]` (z = 0 for 2-D).
pub fn extract_surface(mask: &[u8], shape: &[usize], spacing: &[f64]) -> Result<Vec<[f64; 3]>> {
    let grid = dims(shape, spacing, mask.len())?;
    if !mask.iter().any(|&v| v != 0) {
        return Err(Error::UndefinedSurface("input"));
    }
    let ([_, h, w], sp) = (grid.shape, grid.spacing);
    Ok(boundary_flags(mask, grid)
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            [z as f64 * sp[0], y as f64 * sp[1], x as f64 * sp[2]]
        })
        .collect())
}

/// Exact squared distance transform along one line (lower envelope of
/// parabolas), `f` holding squared distances so far, `INFINITY` for none.
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = step * step;
    let mut k: isize = -1;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                break;
            }
            let p = v[k as usize];
            let (qf, pf) = (q as f64, p as f64);
            let s = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            break;
        }
    }
    if k < 0 {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while j < k as usize && z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = s2 * d * d + f[v[j]];
    }
}

/// Squared distance (mm) from every voxel to the nearest site.
fn squared_edt(sites: &[bool], s: [usize; 3], sp: [f64; 3]) -> Vec<f64> {
    let mut g: Vec<f64> = sites.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let [d, h, w] = s;
    let longest = d.max(h).max(w);
    let (mut line, mut out, mut v, mut z) = (vec![0.0; longest], vec![0.0; longest], vec![0usize; longest], vec![0.0; longest + 1]);
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let n = s[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        for start in 0..g.len() {
            // Visit each line once, from its first element.
            if (start / stride) % n != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * stride];
            }
            edt_line(&line[..n], sp[axis], &mut out[..n], &mut v[..n], &mut z[..n + 1]);
            for i in 0..n {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// Average and root-mean-square symmetric surface distance in millimetres.
pub fn assd_rmsd(pred: &[u8], reference: &[u8], shape: &[usize], spacing: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("prediction has {} voxels, reference {}", pred.len(), reference.len())));
    }
    let grid = dims(shape, spacing, pred.len())?;
    if !pred.iter().any(|&v| v != 0) {
        return Err(Error::UndefinedSurface("prediction"));
    }
    if !reference.iter().any(|&v| v != 0) {
        return Err(Error::UndefinedSurface("reference"));
    }
    let bp = boundary_flags(pred, grid);
    let br = boundary_flags(reference, grid);
    let one_way = |from: &[bool], to: &[bool]| {
        let field = squared_edt(to, grid.shape, grid.spacing);
        let (mut sum, mut sum_sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for (i, _) in from.iter().enumerate().filter(|(_, &b)| b) {
            sum += field[i].sqrt();
            sum_sq += field[i];
            n += 1;
        }
        (sum, sum_sq, n)
    };
    let (a, b) = (one_way(&bp, &br), one_way(&br, &bp));
    // Commutative combination keeps the result exactly symmetric.
    let n = (a.2 + b.2) as f64;
    Ok(((a.0 + b.0) / n, ((a.1 + b.1) / n).sqrt()))
}

/// Per-case metrics; surface distances are `None` when either mask is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dpc: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub assd: Option<f64>,
    pub rmsd: Option<f64>,
    pub counts: Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dpc_mean: f64,
    pub dice_global: f64,
    pub voe_mean: f64,
    pub rvd_mean: Option<f64>,
    pub assd_mean: Option<f64>,
    pub rmsd_mean: Option<f64>,
    pub undefined_surface_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// How surfaces were taken, e.g. `"3d-6-connected"`.
    pub surface: String,
    pub cases: Vec<CaseMetrics>,
    pub aggregate: Aggregate,
}

pub fn evaluate_masks(id: &str, pred: &[u8], reference: &[u8], shape: &[usize], spacing: &[f64]) -> Result<CaseMetrics> {
    let counts = Counts::of(pred, reference)?;
    dims(shape, spacing, pred.len())?;
    let surf = match assd_rmsd(pred, reference, shape, spacing) {
        Ok(v) => Some(v),
        Err(Error::UndefinedSurface(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        id: id.to_string(),
        dpc: counts.dice(),
        voe: counts.voe(),
        rvd: counts.rvd().ok(),
        assd: surf.map(|s| s.0),
        rmsd: surf.map(|s| s.1),
        counts,
    })
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricsReport {
    pub fn from_cases(cases: Vec<CaseMetrics>, surface: &str) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("a metrics report needs at least one case".into()));
        }
        let counts: Vec<Counts> = cases.iter().map(|c| c.counts).collect();
        let aggregate = Aggregate {
            dpc_mean: mean_of(cases.iter().map(|c| c.dpc)).unwrap_or(0.0),
            dice_global: dice_global(&counts),
            voe_mean: mean_of(cases.iter().map(|c| c.voe)).unwrap_or(0.0),
            rvd_mean: mean_of(cases.iter().filter_map(|c| c.rvd)),
            assd_mean: mean_of(cases.iter().filter_map(|c| c.assd)),
            rmsd_mean: mean_of(cases.iter().filter_map(|c| c.rmsd)),
            undefined_surface_count: cases.iter().filter(|c| c.assd.is_none()).count(),
        };
        Ok(Self { surface: surface.to_string(), cases, aggregate })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_examples() {
        let p = [1, 1, 1, 1, 0, 0];
        let r = [0, 0, 1, 1, 1, 1];
        assert_eq!(dice_per_case(&p, &r).unwrap(), 0.5);
        assert!((voe(&p, &r).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rvd(&[1, 1, 1, 1, 1, 1], &[1, 1, 1, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(rvd(&[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap(), -0.5);
        assert!(rvd(&[1], &[0]).is_err());
        assert_eq!(dice_per_case(&[0, 0], &[0, 0]).unwrap(), 1.0);
        assert_eq!(voe(&[0, 0], &[0, 0]).unwrap(), 0.0);
        assert_eq!(dice_per_case(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert!(dice_per_case(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn dice_global_pools_counts() {
        let a = Counts { pred: 4, reference: 4, overlap: 2 };
        let b = Counts { pred: 100, reference: 100, overlap: 100 };
        assert!((dice_global(&[a, b]) - 204.0 / 208.0).abs() < 1e-15);
        assert_eq!(dice_global(&[a]), a.dice());
    }

    #[test]
    fn surface_examples() {
        assert_eq!(extract_surface(&[1u8; 27], &[3, 3, 3], &[1.0; 3]).unwrap().len(), 26);
        assert_eq!(extract_surface(&[1u8; 9], &[3, 3], &[1.0; 2]).unwrap().len(), 8);
        let mut one = [0u8; 27];
        one[13] = 1;
        assert_eq!(extract_surface(&one, &[3, 3, 3], &[2.0, 1.0, 0.5]).unwrap(), vec![[2.0, 1.0, 0.5]]);
        assert!(matches!(extract_surface(&[0u8; 4], &[2, 2], &[1.0; 2]), Err(Error::UndefinedSurface(_))));
    }

    #[test]
    fn unit_offset_voxels() {
        let (a, b) = ([1u8, 0, 0], [0u8, 1, 0]);
        assert_eq!(assd_rmsd(&a, &b, &[1, 3], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        assert_eq!(assd_rmsd(&a, &a, &[1, 3], &[1.0, 1.0]).unwrap(), (0.0, 0.0));
        assert!(assd_rmsd(&a, &[0, 0, 0], &[1, 3], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn edt_respects_anisotropic_spacing() {
        let mut a = vec![0u8; 5 * 5];
        a[0] = 1;
        let mut b = vec![0u8; 5 * 5];
        b[4 * 5 + 4] = 1;
        let (assd, rmsd) = assd_rmsd(&a, &b, &[5, 5], &[2.0, 0.5]).unwrap();
        let d = (64.0f64 + 4.0).sqrt();
        assert!((assd - d).abs() < 1e-12 && (rmsd - d).abs() < 1e-12);
    }
}
