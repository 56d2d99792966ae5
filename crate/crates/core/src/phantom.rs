//! Synthetic two-phase liver phantoms and the slab preprocessing pipeline.
//!
//! Each lesion is split by in-plane angle into a sector drawn with contrast
//! only in PV and a sector drawn with contrast only in ART; elsewhere it has
//! the liver's own attenuation. With the default visibility of 0.55 the two
//! sectors overlap by 0.1 of a turn, so neither phase shows the whole lesion
//! but together they do.
//!
//! Geometry and noise use only IEEE arithmetic on values drawn from the
//! ChaCha stream (no libm calls), so a seed produces the same bytes on every
//! platform.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::volume::{read_volume, write_volume, Volume};

pub const HU_MIN: f32 = -70.0;
pub const HU_MAX: f32 = 180.0;
pub const GENERATION_ATTEMPTS: usize = 10;

const HU_BACKGROUND: f64 = -100.0;
const HU_LIVER: [f64; 2] = [110.0, 70.0];
const HU_LESION: [f64; 2] = [40.0, 150.0];
const HU_VESSEL: [f64; 2] = [200.0, 220.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// Fraction of a turn over which each phase shows lesion contrast.
    pub visibility: f64,
    /// Noise standard deviation as a fraction of the liver/lesion contrast.
    pub noise_fraction: f64,
    /// Largest in-plane ART shift, in voxels, drawn per axis.
    pub misalign: usize,
    pub max_lesions: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self { visibility: 0.55, noise_fraction: 0.05, misalign: 0, max_lesions: 3 }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.visibility > 0.5 && self.visibility <= 1.0) {
            return Err(Error::InvalidArgument(format!("visibility must lie in (0.5, 1], got {}", self.visibility)));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise fraction must be non-negative, got {}", self.noise_fraction)));
        }
        if self.max_lesions == 0 {
            return Err(Error::InvalidArgument("max_lesions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// `[z, y, x]` in voxels.
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Start of the PV sector, in turns.
    pub sector_start: f64,
}

/// How much of the lesion boundary each phase shows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorStats {
    pub boundary_voxels: usize,
    pub pv_fraction: f64,
    pub art_fraction: f64,
    pub union_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub id: String,
    pub seed: u64,
    pub attempt: usize,
    pub params: PhantomParams,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub lesions: Vec<Lesion>,
    /// `[dy, dx]` applied to the ART volume.
    pub art_shift: [i64; 2],
    pub sectors: SectorStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub pv: Volume<f32>,
    pub art: Volume<f32>,
    pub liver: Volume<u8>,
    pub tumor: Volume<u8>,
    pub meta: CaseMeta,
}

/// Angle of `(dy, dx)` in turns, `[0, 1)`, from a cubic arctangent
/// approximation (max error about 0.3 degrees).
fn turns(dy: f64, dx: f64) -> f64 {
    let (ax, ay) = (dx.abs(), dy.abs());
    if ax == 0.0 && ay == 0.0 {
        return 0.0;
    }
    let t = ax.min(ay) / ax.max(ay);
    let mut a = t * (0.97239 - 0.19195 * t * t);
    if ay > ax {
        a = PI / 2.0 - a;
    }
    if dx < 0.0 {
        a = PI - a;
    }
    if dy < 0.0 {
        a = 2.0 * PI - a;
    }
    let u = a / (2.0 * PI);
    if u >= 1.0 {
        0.0
    } else {
        u
    }
}

/// Approximately standard normal: sum of twelve uniforms minus six.
fn noise(rng: &mut Rng) -> f64 {
    (0..12).map(|_| rng.uniform()).sum::<f64>() - 6.0
}

fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    let q: f64 = (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum();
    q <= 1.0
}

/// Which phases show lesion contrast at relative position `u` in turns.
fn visible(u: f64, visibility: f64) -> [bool; 2] {
    [u < visibility, u >= 1.0 - visibility]
}

fn sector_position(lesion: &Lesion, y: f64, x: f64) -> f64 {
    let u = turns(y - lesion.center[1], x - lesion.center[2]) - lesion.sector_start;
    if u < 0.0 {
        u + 1.0
    } else {
        u
    }
}

struct Geometry {
    liver: Vec<u8>,
    /// Index of the lesion owning each voxel, or `usize::MAX`.
    owner: Vec<usize>,
    lesions: Vec<Lesion>,
}

fn build_geometry(rng: &mut Rng, shape: [usize; 3], params: &PhantomParams) -> std::result::Result<Geometry, String> {
    let [d, h, w] = shape;
    let (df, hf, wf) = (d as f64, h as f64, w as f64);
    let centre = [
        (df - 1.0) / 2.0 + rng.uniform_range(-0.1, 0.1) * df,
        (hf - 1.0) / 2.0 + rng.uniform_range(-0.06, 0.06) * hf,
        (wf - 1.0) / 2.0 + rng.uniform_range(-0.06, 0.06) * wf,
    ];
    let main_r = [df * rng.uniform_range(0.55, 0.75), hf * rng.uniform_range(0.28, 0.36), wf * rng.uniform_range(0.30, 0.38)];
    // A smaller second lobe off to one side breaks the ellipsoid symmetry.
    let side = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let lobe_c = [centre[0], centre[1] + hf * rng.uniform_range(0.05, 0.12), centre[2] + side * wf * rng.uniform_range(0.14, 0.2)];
    let lobe_r = [main_r[0] * 0.8, main_r[1] * 0.65, main_r[2] * 0.6];

    let mut liver = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                if in_ellipsoid(p, centre, main_r) || in_ellipsoid(p, lobe_c, lobe_r) {
                    liver[(z * h + y) * w + x] = 1;
                }
            }
        }
    }
    let liver_count = liver.iter().filter(|&&v| v == 1).count();
    if liver_count < d * h * w / 20 {
        return Err(format!("liver covers only {liver_count} voxels"));
    }

    let count = 1 + rng.below(params.max_lesions);
    let mut owner = vec![usize::MAX; d * h * w];
    let mut lesions = Vec::with_capacity(count);
    let short = hf.min(wf);
    for li in 0..count {
        let mut placed = false;
        for _ in 0..20 {
            let r_in = short * rng.uniform_range(0.07, 0.14);
            let radii = [rng.uniform_range(1.2, (0.3 * df).max(1.3)), r_in * rng.uniform_range(0.85, 1.15), r_in * rng.uniform_range(0.85, 1.15)];
            let c = [
                centre[0] + rng.uniform_range(-0.35, 0.35) * main_r[0],
                centre[1] + rng.uniform_range(-0.5, 0.5) * main_r[1],
                centre[2] + rng.uniform_range(-0.5, 0.5) * main_r[2],
            ];
            let lesion = Lesion { center: c, radii, sector_start: rng.uniform() };
            let mut voxels = Vec::new();
            let mut ok = true;
            'scan: for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        if in_ellipsoid([z as f64, y as f64, x as f64], c, radii) {
                            let i = (z * h + y) * w + x;
                            // Keep a one-voxel liver rim, separate lesions, and stay
                            // off the end slices, which never centre a slab.
                            if z == 0 || z + 1 == d || liver[i] == 0 || owner[i] != usize::MAX || !rim_inside(&liver, shape, z, y, x) {
                                ok = false;
                                break 'scan;
                            }
                            voxels.push(i);
                        }
                    }
                }
            }
            if ok && voxels.len() >= 12 {
                for i in voxels {
                    owner[i] = li;
                }
                lesions.push(lesion);
                placed = true;
                break;
            }
        }
        if !placed && lesions.is_empty() {
            return Err("no lesion fits inside the liver".into());
        }
        if !placed {
            break;
        }
    }
    Ok(Geometry { liver, owner, lesions })
}

/// True when every in-plane 4-neighbour of the voxel is liver.
fn rim_inside(liver: &[u8], [_, h, w]: [usize; 3], z: usize, y: usize, x: usize) -> bool {
    if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
        return false;
    }
    let at = |yy: usize, xx: usize| liver[(z * h + yy) * w + xx] == 1;
    at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1)
}

fn sector_stats(g: &Geometry, shape: [usize; 3], visibility: f64) -> SectorStats {
    let [d, h, w] = shape;
    let tumour = |z: usize, y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && g.owner[(z * h + y as usize) * w + x as usize] != usize::MAX
    };
    let (mut total, mut pv, mut art, mut union) = (0usize, 0usize, 0usize, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let o = g.owner[(z * h + y) * w + x];
                if o == usize::MAX {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                let edge = !(tumour(z, yi - 1, xi) && tumour(z, yi + 1, xi) && tumour(z, yi, xi - 1) && tumour(z, yi, xi + 1));
                if !edge {
                    continue;
                }
                let v = visible(sector_position(&g.lesions[o], y as f64, x as f64), visibility);
                total += 1;
                pv += usize::from(v[0]);
                art += usize::from(v[1]);
                union += usize::from(v[0] || v[1]);
            }
        }
    }
    let frac = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
    SectorStats { boundary_voxels: total, pv_fraction: frac(pv), art_fraction: frac(art), union_fraction: frac(union) }
}

/// Vessel tubes running through the slices: `(y0, x0, dy/dz, dx/dz, r)`.
fn vessels(rng: &mut Rng, shape: [usize; 3]) -> Vec<[f64; 5]> {
    let [_, h, w] = shape;
    (0..2 + rng.below(2))
        .map(|_| {
            [
                h as f64 * rng.uniform_range(0.3, 0.7),
                w as f64 * rng.uniform_range(0.3, 0.7),
                rng.uniform_range(-0.8, 0.8),
                rng.uniform_range(-0.8, 0.8),
                rng.uniform_range(0.9, 1.6),
            ]
        })
        .collect()
}

fn on_vessel(tubes: &[[f64; 5]], z: usize, y: usize, x: usize) -> bool {
    tubes.iter().any(|t| {
        let (cy, cx) = (t[0] + t[2] * z as f64, t[1] + t[3] * z as f64);
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        dy * dy + dx * dx <= t[4] * t[4]
    })
}

/// Generates one case. Degenerate draws are retried with fresh streams up
/// to [`GENERATION_ATTEMPTS`] times.
pub fn generate_phantom_case(seed: u64, shape: [usize; 3], params: &PhantomParams, id: &str) -> Result<PhantomCase> {
    params.validate()?;
    let [d, h, w] = shape;
    if d < 5 || h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("phantom size {d}x{h}x{w} needs D >= 5 and H, W divisible by 16")));
    }
    let mut last = String::new();
    for attempt in 0..GENERATION_ATTEMPTS {
        let mut rng = Rng::derive(seed, attempt as u64);
        match build_geometry(&mut rng, shape, params) {
            Ok(g) => return Ok(render(seed, attempt, shape, params, g, &mut rng, id)),
            Err(why) => last = why,
        }
    }
    Err(Error::Generation { attempts: GENERATION_ATTEMPTS, reason: last })
}

fn render(seed: u64, attempt: usize, shape: [usize; 3], params: &PhantomParams, g: Geometry, rng: &mut Rng, id: &str) -> PhantomCase {
    let [d, h, w] = shape;
    let in_plane = (rng.uniform_range(0.52, 0.86) * 100.0).round() / 100.0;
    let spacing = [if rng.uniform() < 0.5 { 0.5 } else { 0.7 }, in_plane, in_plane];
    let m = params.misalign as i64;
    let art_shift = if m > 0 {
        [rng.below(2 * params.misalign + 1) as i64 - m, rng.below(2 * params.misalign + 1) as i64 - m]
    } else {
        [0, 0]
    };
    let tubes = [vessels(rng, shape), vessels(rng, shape)];

    let mut phases = [vec![0f32; d * h * w], vec![0f32; d * h * w]];
    for (p, out) in phases.iter_mut().enumerate() {
        let sigma = params.noise_fraction * (HU_LIVER[p] - HU_LESION[p]).abs();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let base = if g.liver[i] == 0 {
                        HU_BACKGROUND
                    } else if g.owner[i] != usize::MAX {
                        let u = sector_position(&g.lesions[g.owner[i]], y as f64, x as f64);
                        if visible(u, params.visibility)[p] {
                            HU_LESION[p]
                        } else {
                            HU_LIVER[p]
                        }
                    } else if on_vessel(&tubes[p], z, y, x) {
                        HU_VESSEL[p]
                    } else {
                        HU_LIVER[p]
                    };
                    out[i] = (base + sigma * noise(rng)) as f32;
                }
            }
        }
    }
    let [pv, mut art] = phases;
    if art_shift != [0, 0] {
        art = shift_plane(&art, shape, art_shift, HU_BACKGROUND as f32);
    }

    let sectors = sector_stats(&g, shape, params.visibility);
    let tumor: Vec<u8> = g.owner.iter().map(|&o| u8::from(o != usize::MAX)).collect();
    let vol = |data| Volume::new(shape, spacing, data).expect("generator geometry is consistent");
    let meta = CaseMeta {
        id: id.to_string(),
        seed,
        attempt,
        params: params.clone(),
        shape,
        spacing,
        lesions: g.lesions,
        art_shift,
        sectors,
    };
    PhantomCase { pv: vol(pv), art: vol(art), liver: Volume::new(shape, spacing, g.liver).unwrap(), tumor: Volume::new(shape, spacing, tumor).unwrap(), meta }
}

fn shift_plane<V: Copy>(data: &[V], [d, h, w]: [usize; 3], [dy, dx]: [i64; 2], fill: V) -> Vec<V> {
    let mut out = vec![fill; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i64 - dy, x as i64 - dx);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    out[(z * h + y) * w + x] = data[(z * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub const CASE_FILES: [&str; 5] = ["pv.f32raw", "art.f32raw", "liver.u8raw", "tumor.u8raw", "meta.json"];

impl PhantomCase {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_volume(&self.pv, &dir.join(CASE_FILES[0]))?;
        write_volume(&self.art, &dir.join(CASE_FILES[1]))?;
        write_volume(&self.liver, &dir.join(CASE_FILES[2]))?;
        write_volume(&self.tumor, &dir.join(CASE_FILES[3]))?;
        let meta = dir.join(CASE_FILES[4]);
        fs::write(&meta, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&meta, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(CASE_FILES[4]);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: CaseMeta = serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
        let case = Self {
            pv: read_volume(&dir.join(CASE_FILES[0]))?,
            art: read_volume(&dir.join(CASE_FILES[1]))?,
            liver: read_volume(&dir.join(CASE_FILES[2]))?,
            tumor: read_volume(&dir.join(CASE_FILES[3]))?,
            meta,
        };
        let shape = case.pv.shape();
        if [case.art.shape(), case.liver.shape(), case.tumor.shape()].iter().any(|&s| s != shape) {
            return Err(Error::format(dir, "phase and mask volumes differ in shape"));
        }
        Ok(case)
    }
}

/// Case directory name for index `i`.
pub fn case_id(i: usize) -> String {
    format!("case_{i:04}")
}

/// Writes `count` cases under `out`; case `i` uses seed `seed ^ i`.
pub fn generate_dataset(out: &Path, count: usize, seed: u64, shape: [usize; 3], params: &PhantomParams) -> Result<Vec<String>> {
    (0..count)
        .map(|i| {
            let id = case_id(i);
            generate_phantom_case(seed ^ i as u64, shape, params, &id)?.write(&out.join(&id))?;
            Ok(id)
        })
        .collect()
}

/// Case directories under `root` (those holding a `meta.json`), sorted.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join(CASE_FILES[4]).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn hu_clip(v: &Volume<f32>) -> Volume<f32> {
    v.map(|x| x.clamp(HU_MIN, HU_MAX)).expect("same geometry")
}

/// Clipped HU window mapped linearly onto `[0, 1]`.
pub fn normalize_hu(x: f32) -> f32 {
    (x.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

/// Mean voxel position `[z, y, x]` of a mask.
pub fn centroid(mask: &Volume<u8>) -> Option<[f64; 3]> {
    let [d, h, w] = mask.shape();
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) == 1 {
                    sum[0] += z as f64;
                    sum[1] += y as f64;
                    sum[2] += x as f64;
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| sum.map(|s| s / n as f64))
}

/// Integer translation of a volume; uncovered voxels take `fill`.
pub fn translate<V: crate::volume::Voxel>(v: &Volume<V>, shift: [i64; 3], fill: V) -> Volume<V> {
    let [d, h, w] = v.shape();
    let mut out = vec![fill; v.data().len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let s = [z as i64 - shift[0], y as i64 - shift[1], x as i64 - shift[2]];
                if s.iter().zip([d, h, w]).all(|(&c, n)| c >= 0 && (c as usize) < n) {
                    out[(z * h + y) * w + x] = v.get(s[0] as usize, s[1] as usize, s[2] as usize);
                }
            }
        }
    }
    Volume::new(v.shape(), v.spacing(), out).expect("same geometry")
}

/// Moves `moving` (and its mask) so the rounded tumour centroids coincide.
/// Returns the translated pair and the applied shift `[dz, dy, dx]`.
pub fn center_align(
    reference: &Volume<u8>,
    moving: &Volume<f32>,
    moving_mask: &Volume<u8>,
) -> Result<(Volume<f32>, Volume<u8>, [i64; 3])> {
    if reference.shape() != moving.shape() || moving.shape() != moving_mask.shape() {
        return Err(Error::Shape("alignment volumes differ in shape".into()));
    }
    let r = centroid(reference).ok_or(Error::AlignmentUndefined("reference"))?;
    let m = centroid(moving_mask).ok_or(Error::AlignmentUndefined("moving"))?;
    let shift = [0, 1, 2].map(|i| r[i].round() as i64 - m[i].round() as i64);
    Ok((translate(moving, shift, 0.0), translate(moving_mask, shift, 0), shift))
}

/// One training/inference sample: three adjacent slices per phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseCaseSample {
    pub case_id: String,
    /// Index of the centre slice.
    pub slice: usize,
    pub spacing: [f64; 3],
    /// `[3, H, W]`, normalised and liver-masked.
    pub pv: Tensor<f32>,
    pub art: Tensor<f32>,
    /// `H * W` masks of the centre slice.
    pub liver: Vec<u8>,
    pub tumor: Vec<u8>,
}

impl PhaseCaseSample {
    pub fn height(&self) -> usize {
        self.pv.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pv.shape()[2]
    }
}

/// Slabs `(k-1, k, k+1)` for every interior slice `k` whose centre slice
/// contains liver. Each slice is clipped, normalised and multiplied by its
/// own liver mask.
pub fn make_slabs(case: &PhantomCase) -> Vec<PhaseCaseSample> {
    let [d, h, w] = case.pv.shape();
    let plane = h * w;
    let prep = |v: &Volume<f32>, z: usize| -> Vec<f32> {
        v.slice(z).iter().zip(case.liver.slice(z)).map(|(&x, &m)| if m == 1 { normalize_hu(x) } else { 0.0 }).collect()
    };
    let mut out = Vec::new();
    for k in 1..d.saturating_sub(1) {
        if !case.liver.slice(k).contains(&1) {
            continue;
        }
        let slab = |v: &Volume<f32>| {
            let mut data = Vec::with_capacity(3 * plane);
            for z in k - 1..=k + 1 {
                data.extend(prep(v, z));
            }
            Tensor::new(vec![3, h, w], data).expect("slab shape")
        };
        out.push(PhaseCaseSample {
            case_id: case.meta.id.clone(),
            slice: k,
            spacing: case.pv.spacing(),
            pv: slab(&case.pv),
            art: slab(&case.art),
            liver: case.liver.slice(k).to_vec(),
            tumor: case.tumor.slice(k).to_vec(),
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentLimits {
    pub max_shift: f64,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for AugmentLimits {
    fn default() -> Self {
        Self { max_shift: 8.0, max_rotation_deg: 15.0, min_scale: 0.9, max_scale: 1.1 }
    }
}

impl AugmentLimits {
    pub fn none() -> Self {
        Self { max_shift: 0.0, max_rotation_deg: 0.0, min_scale: 1.0, max_scale: 1.0 }
    }
}

/// Random shift, rotation and scaling about the image centre, shared by
/// both slabs (bilinear) and both masks (nearest neighbour).
pub fn augment(sample: &PhaseCaseSample, rng: &mut Rng, limits: &AugmentLimits) -> PhaseCaseSample {
    let ty = rng.uniform_range(-limits.max_shift, limits.max_shift);
    let tx = rng.uniform_range(-limits.max_shift, limits.max_shift);
    let angle = rng.uniform_range(-limits.max_rotation_deg, limits.max_rotation_deg).to_radians();
    let scale = rng.uniform_range(limits.min_scale, limits.max_scale);
    if ty == 0.0 && tx == 0.0 && angle == 0.0 && scale == 1.0 {
        return sample.clone();
    }
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    // Output pixel -> source position (inverse transform).
    let source = |y: usize, x: usize| {
        let (dy, dx) = (y as f64 - cy - ty, x as f64 - cx - tx);
        ((cos * dy - sin * dx) / scale + cy, (sin * dy + cos * dx) / scale + cx)
    };

    let bilinear = |img: &[f32], sy: f64, sx: f64| -> f32 {
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let at = |yy: f64, xx: f64| -> f64 {
            if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                0.0
            } else {
                img[yy as usize * w + xx as usize] as f64
            }
        };
        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0)) + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
        v as f32
    };
    let nearest = |m: &[u8], sy: f64, sx: f64| -> u8 {
        let (yy, xx) = (sy.round(), sx.round());
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0
        } else {
            m[yy as usize * w + xx as usize]
        }
    };

    let plane = h * w;
    let warp_slab = |t: &Tensor<f32>| {
        let mut out = vec![0f32; 3 * plane];
        for c in 0..3 {
            let img = &t.data()[c * plane..(c + 1) * plane];
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = source(y, x);
                    out[c * plane + y * w + x] = bilinear(img, sy, sx);
                }
            }
        }
        Tensor::new(vec![3, h, w], out).expect("slab shape")
    };
    let warp_mask = |m: &[u8]| {
        let mut out = vec![0u8; plane];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = source(y, x);
                out[y * w + x] = nearest(m, sy, sx);
            }
        }
        out
    };
    PhaseCaseSample {
        case_id: sample.case_id.clone(),
        slice: sample.slice,
        spacing: sample.spacing,
        pv: warp_slab(&sample.pv),
        art: warp_slab(&sample.art),
        liver: warp_mask(&sample.liver),
        tumor: warp_mask(&sample.tumor),
    }
}
