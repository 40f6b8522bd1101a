//! Procedural heightfields for the four evaluation terrains and the
//! continuous height / normal queries the rest of the crate relies on.
//!
//! Cells are square and cell-centred: cell `(ix, iy)` covers
//! `[x_min + ix·res, x_min + (ix+1)·res) × [y_min + iy·res, …)` and its stored
//! height is the value at its centre. The arena is centred on the world
//! origin, and the spawn zone (flat on every kind) sits around it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Simple,
    Gaps,
    Obstacles,
    Stairs,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 4] = [
        TerrainKind::Simple,
        TerrainKind::Gaps,
        TerrainKind::Obstacles,
        TerrainKind::Stairs,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TerrainKind::Simple => "simple",
            TerrainKind::Gaps => "gaps",
            TerrainKind::Obstacles => "obstacles",
            TerrainKind::Stairs => "stairs",
        }
    }

    fn salt(self) -> u64 {
        match self {
            TerrainKind::Simple => 0x51,
            TerrainKind::Gaps => 0x6a,
            TerrainKind::Obstacles => 0x0b,
            TerrainKind::Stairs => 0x57,
        }
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TerrainKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "simple" => Ok(TerrainKind::Simple),
            "gaps" | "gap" => Ok(TerrainKind::Gaps),
            "obstacles" | "obstacle" => Ok(TerrainKind::Obstacles),
            "stairs" | "stair" => Ok(TerrainKind::Stairs),
            other => Err(Error::InvalidParams(format!("unknown terrain kind `{other}`"))),
        }
    }
}

/// Axis-aligned rectangle in world coordinates (metres).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Rect { x_min, y_min, x_max, y_max }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn expanded(&self, margin: f64) -> Rect {
        Rect::new(
            self.x_min - margin,
            self.y_min - margin,
            self.x_max + margin,
            self.y_max + margin,
        )
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x_min < other.x_max
            && other.x_min < self.x_max
            && self.y_min < other.y_max
            && other.y_min < self.y_max
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    pub fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x_min - x).max(0.0).max(x - self.x_max);
        let dy = (self.y_min - y).max(0.0).max(y - self.y_max);
        dx.hypot(dy)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TerrainParams {
    /// Metres per cell.
    pub resolution: f64,
    /// Arena size (width along x, length along y) in metres.
    pub extent: (f64, f64),
    pub bump_amp_range: (f64, f64),
    /// Lattice spacing of the value noise used for bumps.
    pub bump_lattice: f64,
    pub gap_width_range: (f64, f64),
    /// Length of each gap along its long axis.
    pub gap_length_range: (f64, f64),
    pub gap_depth: f64,
    /// Fraction of the arena carved out as gaps.
    pub gap_fraction_target: f64,
    pub obstacle_size_range: (f64, f64),
    pub obstacle_height_range: (f64, f64),
    pub obstacle_density_target: f64,
    pub step_height: f64,
    pub tread_depth: f64,
    pub spawn_zone: Rect,
}

impl Default for TerrainParams {
    fn default() -> Self {
        TerrainParams {
            resolution: 0.05,
            extent: (20.0, 20.0),
            bump_amp_range: (0.03, 0.05),
            bump_lattice: 0.5,
            gap_width_range: (0.8, 1.2),
            gap_length_range: (2.0, 6.0),
            gap_depth: -1.0,
            gap_fraction_target: 0.15,
            obstacle_size_range: (0.3, 0.8),
            obstacle_height_range: (0.1, 0.4),
            obstacle_density_target: 0.15,
            step_height: 0.12,
            tread_depth: 0.30,
            spawn_zone: Rect::new(-1.0, -1.0, 1.0, 1.0),
        }
    }
}

/// Minimum clear ground between two carved gaps.
const GAP_SEPARATION: f64 = 0.3;
/// Clear ground kept between the spawn zone and any gap or block.
const SPAWN_MARGIN: f64 = 0.5;
/// Width of the blend between the flat spawn zone and the bump field.
const SPAWN_BLEND: f64 = 0.5;
const OBSTACLE_TOLERANCE: f64 = 0.02;
const MAX_PLACEMENT_ATTEMPTS: usize = 50_000;

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
        return Err(Error::InvalidParams(format!(
            "{name} must be a non-empty, non-negative range, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

impl TerrainParams {
    pub fn bounds(&self) -> Rect {
        Rect::new(
            -0.5 * self.extent.0,
            -0.5 * self.extent.1,
            0.5 * self.extent.0,
            0.5 * self.extent.1,
        )
    }

    pub fn validate(&self, kind: TerrainKind) -> Result<()> {
        if !(self.resolution.is_finite() && self.resolution > 0.0) {
            return Err(Error::InvalidParams("resolution must be positive".into()));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::InvalidParams("extent must be positive".into()));
        }
        let nx = (self.extent.0 / self.resolution).round();
        let ny = (self.extent.1 / self.resolution).round();
        if nx < 2.0 || ny < 2.0 {
            return Err(Error::ExtentTooSmall(format!(
                "grid of {nx}×{ny} cells; at least 2×2 required"
            )));
        }
        check_range("bump_amp_range", self.bump_amp_range)?;
        check_range("gap_width_range", self.gap_width_range)?;
        check_range("gap_length_range", self.gap_length_range)?;
        check_range("obstacle_size_range", self.obstacle_size_range)?;
        check_range("obstacle_height_range", self.obstacle_height_range)?;
        if !(self.gap_depth.is_finite() && self.gap_depth < 0.0) {
            return Err(Error::InvalidParams("gap_depth must be negative".into()));
        }
        if !(0.0..=0.8).contains(&self.gap_fraction_target) {
            return Err(Error::InvalidParams(
                "gap_fraction_target must lie in [0, 0.8]".into(),
            ));
        }
        if !(0.0..=0.8).contains(&self.obstacle_density_target) {
            return Err(Error::InvalidParams(
                "obstacle_density_target must lie in [0, 0.8]".into(),
            ));
        }
        if !(self.bump_lattice > 0.0) {
            return Err(Error::InvalidParams("bump_lattice must be positive".into()));
        }
        match kind {
            TerrainKind::Stairs => {
                if !(self.step_height > 0.0) || !(self.tread_depth > 0.0) {
                    return Err(Error::InvalidParams(
                        "stairs need positive step_height and tread_depth".into(),
                    ));
                }
            }
            TerrainKind::Gaps => {
                if self.gap_width_range.0 < self.resolution {
                    return Err(Error::InvalidParams(
                        "gap widths must be at least one cell".into(),
                    ));
                }
            }
            TerrainKind::Obstacles => {
                if self.obstacle_size_range.0 < self.resolution {
                    return Err(Error::InvalidParams(
                        "obstacle sizes must be at least one cell".into(),
                    ));
                }
            }
            TerrainKind::Simple => {}
        }
        let b = self.bounds();
        let s = &self.spawn_zone;
        if !(s.x_min < s.x_max && s.y_min < s.y_max)
            || s.x_min < b.x_min
            || s.y_min < b.y_min
            || s.x_max > b.x_max
            || s.y_max > b.y_max
        {
            return Err(Error::InvalidParams(
                "spawn_zone must be a non-empty rectangle inside the extent".into(),
            ));
        }
        Ok(())
    }
}

/// Regular-grid heightfield with generator metadata. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct TerrainMap {
    kind: TerrainKind,
    seed: u64,
    params: TerrainParams,
    nx: usize,
    ny: usize,
    cells: Vec<f64>,
    gap_mask: Vec<bool>,
    carved: Vec<Rect>,
}

impl TerrainMap {
    /// Builds a map from explicit cell heights (row-major, `iy * nx + ix`).
    /// Used for synthetic test maps and when loading files.
    pub fn from_cells(
        kind: TerrainKind,
        params: TerrainParams,
        seed: u64,
        cells: Vec<f64>,
        gap_mask: Vec<bool>,
        carved: Vec<Rect>,
    ) -> Result<Self> {
        let nx = (params.extent.0 / params.resolution).round() as usize;
        let ny = (params.extent.1 / params.resolution).round() as usize;
        if nx < 2 || ny < 2 {
            return Err(Error::ExtentTooSmall(format!("{nx}×{ny} cells")));
        }
        if cells.len() != nx * ny || gap_mask.len() != nx * ny {
            return Err(Error::InvalidParams(format!(
                "expected {} cells, got {} heights and {} mask entries",
                nx * ny,
                cells.len(),
                gap_mask.len()
            )));
        }
        if cells.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidParams("non-finite height".into()));
        }
        Ok(TerrainMap { kind, seed, params, nx, ny, cells, gap_mask, carved })
    }

    pub fn kind(&self) -> TerrainKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &TerrainParams {
        &self.params
    }

    pub fn resolution(&self) -> f64 {
        self.params.resolution
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn extent(&self) -> (f64, f64) {
        self.params.extent
    }

    pub fn bounds(&self) -> Rect {
        self.params.bounds()
    }

    pub fn spawn_zone(&self) -> Rect {
        self.params.spawn_zone
    }

    pub fn gap_depth(&self) -> f64 {
        self.params.gap_depth
    }

    /// World coordinates of the centre of cell (0, 0).
    pub fn origin(&self) -> (f64, f64) {
        let b = self.bounds();
        let r = self.resolution();
        (b.x_min + 0.5 * r, b.y_min + 0.5 * r)
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let (ox, oy) = self.origin();
        let r = self.resolution();
        (ox + ix as f64 * r, oy + iy as f64 * r)
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn gap_mask(&self) -> &[bool] {
        &self.gap_mask
    }

    /// Rectangles carved by the generator (gaps or obstacle blocks).
    pub fn carved(&self) -> &[Rect] {
        &self.carved
    }

    pub fn cell(&self, ix: usize, iy: usize) -> f64 {
        self.cells[iy * self.nx + ix]
    }

    pub fn is_gap(&self, ix: usize, iy: usize) -> bool {
        self.gap_mask[iy * self.nx + ix]
    }

    pub fn gap_fraction(&self) -> f64 {
        self.gap_mask.iter().filter(|&&g| g).count() as f64 / self.gap_mask.len() as f64
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.bounds().contains(x, y)
    }

    /// Index of the cell containing `(x, y)`, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let b = self.bounds();
        let r = self.resolution();
        let ix = ((x - b.x_min) / r).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let iy = ((y - b.y_min) / r).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (ix, iy)
    }

    pub fn is_gap_at(&self, x: f64, y: f64) -> bool {
        let (ix, iy) = self.cell_of(x, y);
        self.is_gap(ix, iy)
    }

    /// Terrain height at a world point. Bilinear between cell centres, except
    /// that any point inside a gap cell reads the exact gap depth.
    pub fn height_at(&self, x: f64, y: f64) -> Result<f64> {
        if !(self.contains(x, y)) {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(self.sample(x, y))
    }

    /// Same as [`height_at`](Self::height_at) but clamps off-map queries to
    /// the nearest edge instead of failing.
    pub fn height_at_clamped(&self, x: f64, y: f64) -> f64 {
        let b = self.bounds();
        let x = if x.is_finite() { x.clamp(b.x_min, b.x_max) } else { 0.0 };
        let y = if y.is_finite() { y.clamp(b.y_min, b.y_max) } else { 0.0 };
        self.sample(x, y)
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (ix, iy) = self.cell_of(x, y);
        if self.is_gap(ix, iy) {
            return self.params.gap_depth;
        }
        let (ox, oy) = self.origin();
        let r = self.resolution();
        let fx = ((x - ox) / r).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - oy) / r).clamp(0.0, (self.ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.nx - 2);
        let j0 = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let h00 = self.cell(i0, j0);
        let h10 = self.cell(i0 + 1, j0);
        let h01 = self.cell(i0, j0 + 1);
        let h11 = self.cell(i0 + 1, j0 + 1);
        let a = h00 + (h10 - h00) * tx;
        let b = h01 + (h11 - h01) * tx;
        a + (b - a) * ty
    }

    /// Unit normal from central-difference tangents (one cell either side).
    pub fn surface_normal(&self, x: f64, y: f64) -> Result<[f64; 3]> {
        if !self.contains(x, y) {
            return Err(Error::OutOfBounds { x, y });
        }
        Ok(self.normal_clamped(x, y))
    }

    pub fn normal_clamped(&self, x: f64, y: f64) -> [f64; 3] {
        let b = self.bounds();
        let h = self.resolution();
        let x = x.clamp(b.x_min, b.x_max);
        let y = y.clamp(b.y_min, b.y_max);
        let (xa, xb) = ((x - h).max(b.x_min), (x + h).min(b.x_max));
        let (ya, yb) = ((y - h).max(b.y_min), (y + h).min(b.y_max));
        let dhdx = (self.sample(xb, y) - self.sample(xa, y)) / (xb - xa);
        let dhdy = (self.sample(x, yb) - self.sample(x, ya)) / (yb - ya);
        // (1, 0, dhdx) × (0, 1, dhdy) = (−dhdx, −dhdy, 1)
        let n = (dhdx * dhdx + dhdy * dhdy + 1.0).sqrt();
        [-dhdx / n, -dhdy / n, 1.0 / n]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = TerrainFile::from(self);
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&TerrainFile::from(self))?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let file: TerrainFile = serde_json::from_slice(&bytes)?;
        file.into_map().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// On-disk representation: header fields followed by row-major heights and
/// the gap mask.
#[derive(Serialize, Deserialize)]
struct TerrainFile {
    format_version: u32,
    kind: TerrainKind,
    seed: u64,
    params: TerrainParams,
    resolution: f64,
    extent: (f64, f64),
    nx: usize,
    ny: usize,
    carved: Vec<Rect>,
    heights: Vec<f64>,
    gap_mask: Vec<u8>,
}

impl From<&TerrainMap> for TerrainFile {
    fn from(m: &TerrainMap) -> Self {
        TerrainFile {
            format_version: FORMAT_VERSION,
            kind: m.kind,
            seed: m.seed,
            params: m.params.clone(),
            resolution: m.resolution(),
            extent: m.extent(),
            nx: m.nx,
            ny: m.ny,
            carved: m.carved.clone(),
            heights: m.cells.clone(),
            gap_mask: m.gap_mask.iter().map(|&g| g as u8).collect(),
        }
    }
}

impl TerrainFile {
    fn into_map(self) -> Result<TerrainMap> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidParams(format!(
                "unsupported terrain format version {}",
                self.format_version
            )));
        }
        if self.resolution != self.params.resolution || self.extent != self.params.extent {
            return Err(Error::InvalidParams("header disagrees with params".into()));
        }
        let map = TerrainMap::from_cells(
            self.kind,
            self.params,
            self.seed,
            self.heights,
            self.gap_mask.into_iter().map(|g| g != 0).collect(),
            self.carved,
        )?;
        if map.dims() != (self.nx, self.ny) {
            return Err(Error::InvalidParams("grid dimensions disagree".into()));
        }
        Ok(map)
    }
}

/// Generates a terrain. Pure in `(kind, params, seed)`.
pub fn generate_terrain(kind: TerrainKind, params: &TerrainParams, seed: u64) -> Result<TerrainMap> {
    params.validate(kind)?;
    let mut grid = Grid::new(params);
    let mut rng = seeds::rng(seed, &[kind.salt()]);
    let carved = match kind {
        TerrainKind::Simple => {
            carve_bumps(&mut grid, params, &mut rng);
            Vec::new()
        }
        TerrainKind::Gaps => carve_gaps(&mut grid, params, &mut rng)?,
        TerrainKind::Obstacles => place_obstacles(&mut grid, params, &mut rng)?,
        TerrainKind::Stairs => {
            cut_stairs(&mut grid, params)?;
            Vec::new()
        }
    };
    TerrainMap::from_cells(kind, params.clone(), seed, grid.cells, grid.gap_mask, carved)
}

struct Grid {
    nx: usize,
    ny: usize,
    res: f64,
    bounds: Rect,
    cells: Vec<f64>,
    gap_mask: Vec<bool>,
}

impl Grid {
    fn new(params: &TerrainParams) -> Self {
        let nx = (params.extent.0 / params.resolution).round() as usize;
        let ny = (params.extent.1 / params.resolution).round() as usize;
        Grid {
            nx,
            ny,
            res: params.resolution,
            bounds: params.bounds(),
            cells: vec![0.0; nx * ny],
            gap_mask: vec![false; nx * ny],
        }
    }

    fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.bounds.x_min + (ix as f64 + 0.5) * self.res,
            self.bounds.y_min + (iy as f64 + 0.5) * self.res,
        )
    }

    /// World rectangle of the half-open cell range `[ix0, ix0+w) × [iy0, iy0+h)`.
    fn cell_rect(&self, ix0: usize, iy0: usize, w: usize, h: usize) -> Rect {
        Rect::new(
            self.bounds.x_min + ix0 as f64 * self.res,
            self.bounds.y_min + iy0 as f64 * self.res,
            self.bounds.x_min + (ix0 + w) as f64 * self.res,
            self.bounds.y_min + (iy0 + h) as f64 * self.res,
        )
    }

    /// Edge index nearest to world x.
    fn edge_x(&self, x: f64) -> usize {
        ((x - self.bounds.x_min) / self.res).round().max(0.0) as usize
    }

    fn cells_of(&self, len_m: f64) -> usize {
        ((len_m / self.res).round() as usize).max(1)
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn carve_bumps(grid: &mut Grid, params: &TerrainParams, rng: &mut impl Rng) {
    let amp = uniform(rng, params.bump_amp_range);
    let s = params.bump_lattice;
    let mx = (params.extent.0 / s).ceil() as usize + 2;
    let my = (params.extent.1 / s).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..mx * my).map(|_| rng.random::<f64>()).collect();
    let spawn = params.spawn_zone;
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = grid.center(ix, iy);
            let u = (x - grid.bounds.x_min) / s;
            let v = (y - grid.bounds.y_min) / s;
            let (i, j) = ((u.floor() as usize).min(mx - 2), (v.floor() as usize).min(my - 2));
            let (tx, ty) = (u - i as f64, v - j as f64);
            let l = |a: usize, b: usize| lattice[b * mx + a];
            let top = l(i, j) + (l(i + 1, j) - l(i, j)) * tx;
            let bot = l(i, j + 1) + (l(i + 1, j + 1) - l(i, j + 1)) * tx;
            let noise = (top + (bot - top) * ty).clamp(0.0, 1.0);
            let blend = (spawn.distance(x, y) / SPAWN_BLEND).clamp(0.0, 1.0);
            grid.cells[iy * grid.nx + ix] = amp * noise * blend;
        }
    }
}

fn carve_gaps(grid: &mut Grid, params: &TerrainParams, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    let total = (grid.nx * grid.ny) as f64;
    let target_cells = (params.gap_fraction_target * total).round() as usize;
    let keep_out = params.spawn_zone.expanded(SPAWN_MARGIN);
    let sep_cells = (GAP_SEPARATION / grid.res).ceil() as usize;
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut carved_cells = 0usize;

    // The first gap always lies straight ahead of the spawn zone so that a
    // walker heading along +x meets it.
    let width = grid.cells_of(uniform(rng, params.gap_width_range));
    let length = grid
        .cells_of(uniform(rng, params.gap_length_range))
        .max(width)
        .min(grid.ny);
    let ix0 = grid.edge_x(keep_out.x_max + uniform(rng, (0.0, 1.0)));
    if ix0 + width > grid.nx || length < width {
        return Err(Error::ExtentTooSmall(
            "no room for a gap beyond the spawn zone".into(),
        ));
    }
    let iy0 = (grid.ny - length) / 2;
    rects.push((ix0, iy0, width, length));
    carved_cells += width * length;

    let mut attempts = 0;
    while carved_cells < target_cells && attempts < MAX_PLACEMENT_ATTEMPTS {
        attempts += 1;
        let w = grid.cells_of(uniform(rng, params.gap_width_range));
        let mut l = grid.cells_of(uniform(rng, params.gap_length_range)).max(w);
        let remaining = target_cells - carved_cells;
        if w * l > remaining {
            l = remaining / w;
            if l < w {
                break;
            }
        }
        let (dx, dy) = if rng.random::<bool>() { (w, l) } else { (l, w) };
        if dx > grid.nx || dy > grid.ny {
            continue;
        }
        let ix = rng.random_range(0..=grid.nx - dx);
        let iy = rng.random_range(0..=grid.ny - dy);
        if grid.cell_rect(ix, iy, dx, dy).intersects(&keep_out) {
            continue;
        }
        let clash = rects.iter().any(|&(ax, ay, aw, ah)| {
            ix < ax + aw + sep_cells && ax < ix + dx + sep_cells && iy < ay + ah + sep_cells && ay < iy + dy + sep_cells
        });
        if clash {
            continue;
        }
        rects.push((ix, iy, dx, dy));
        carved_cells += dx * dy;
    }

    for &(ix0, iy0, w, h) in &rects {
        for iy in iy0..iy0 + h {
            for ix in ix0..ix0 + w {
                grid.cells[iy * grid.nx + ix] = params.gap_depth;
                grid.gap_mask[iy * grid.nx + ix] = true;
            }
        }
    }
    Ok(rects
        .iter()
        .map(|&(ix, iy, w, h)| grid.cell_rect(ix, iy, w, h))
        .collect())
}

fn place_obstacles(grid: &mut Grid, params: &TerrainParams, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    let total = (grid.nx * grid.ny) as f64;
    let target = params.obstacle_density_target;
    let keep_out = params.spawn_zone.expanded(SPAWN_MARGIN);
    let mut covered = vec![false; grid.nx * grid.ny];
    let mut covered_cells = 0usize;
    let mut blocks = Vec::new();
    let mut attempts = 0;
    while (covered_cells as f64) / total < target && attempts < MAX_PLACEMENT_ATTEMPTS {
        attempts += 1;
        let w = grid.cells_of(uniform(rng, params.obstacle_size_range));
        let h = grid.cells_of(uniform(rng, params.obstacle_size_range));
        let height = uniform(rng, params.obstacle_height_range);
        if w > grid.nx || h > grid.ny {
            continue;
        }
        let ix0 = rng.random_range(0..=grid.nx - w);
        let iy0 = rng.random_range(0..=grid.ny - h);
        let rect = grid.cell_rect(ix0, iy0, w, h);
        if rect.intersects(&keep_out) {
            continue;
        }
        let mut fresh = 0;
        for iy in iy0..iy0 + h {
            for ix in ix0..ix0 + w {
                if !covered[iy * grid.nx + ix] {
                    fresh += 1;
                }
            }
        }
        if (covered_cells + fresh) as f64 / total > target + OBSTACLE_TOLERANCE {
            continue;
        }
        for iy in iy0..iy0 + h {
            for ix in ix0..ix0 + w {
                let i = iy * grid.nx + ix;
                covered[i] = true;
                grid.cells[i] = grid.cells[i].max(height);
            }
        }
        covered_cells += fresh;
        blocks.push(rect);
    }
    let density = covered_cells as f64 / total;
    if (density - target).abs() > OBSTACLE_TOLERANCE {
        return Err(Error::ExtentTooSmall(format!(
            "reached obstacle density {density:.3}, target {target:.3}"
        )));
    }
    Ok(blocks)
}

fn cut_stairs(grid: &mut Grid, params: &TerrainParams) -> Result<()> {
    let x0 = params.spawn_zone.x_max;
    if grid.bounds.x_max - x0 < params.tread_depth {
        return Err(Error::ExtentTooSmall(
            "no room for a full tread beyond the spawn zone".into(),
        ));
    }
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, _) = grid.center(ix, iy);
            if x > x0 {
                let step = ((x - x0) / params.tread_depth).floor();
                grid.cells[iy * grid.nx + ix] = -params.step_height * step;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(extent: f64, res: f64) -> TerrainMap {
        let p = TerrainParams {
            resolution: res,
            extent: (extent, extent),
            spawn_zone: Rect::new(-0.1, -0.1, 0.1, 0.1),
            ..Default::default()
        };
        let n = (extent / res).round() as usize;
        TerrainMap::from_cells(TerrainKind::Simple, p, 0, vec![0.0; n * n], vec![false; n * n], vec![])
            .unwrap()
    }

    #[test]
    fn simple_heights_stay_within_bump_bounds() {
        let p = TerrainParams { bump_amp_range: (0.03, 0.05), ..Default::default() };
        let m = generate_terrain(TerrainKind::Simple, &p, 7).unwrap();
        assert!(m.cells().iter().all(|&h| (0.0..=0.05).contains(&h)));
        assert!(m.cells().iter().any(|&h| h > 0.01));
        assert_eq!(m.dims(), (400, 400));
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let p = TerrainParams { bump_amp_range: (0.0, 0.0), ..Default::default() };
        for seed in [0, 1, 99] {
            let m = generate_terrain(TerrainKind::Simple, &p, seed).unwrap();
            assert!(m.cells().iter().all(|&h| h == 0.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = TerrainParams::default();
        for kind in TerrainKind::ALL {
            let a = generate_terrain(kind, &p, 11).unwrap();
            let b = generate_terrain(kind, &p, 11).unwrap();
            assert_eq!(a, b);
            let bits = |m: &TerrainMap| m.cells().iter().map(|h| h.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
        }
    }

    #[test]
    fn gap_cells_sit_exactly_at_gap_depth() {
        let m = generate_terrain(TerrainKind::Gaps, &TerrainParams::default(), 3).unwrap();
        for (h, g) in m.cells().iter().zip(m.gap_mask()) {
            if *g {
                assert_eq!(*h, -1.0);
            } else {
                assert_eq!(*h, 0.0);
            }
        }
        assert!(m.gap_fraction() > 0.0);
    }

    #[test]
    fn gap_fraction_matches_carved_area() {
        let p = TerrainParams { gap_fraction_target: 0.2, ..Default::default() };
        let m = generate_terrain(TerrainKind::Gaps, &p, 5).unwrap();
        let analytic: f64 = m.carved().iter().map(Rect::area).sum::<f64>() / (20.0 * 20.0);
        let cell = 0.05 * 0.05 / 400.0;
        assert!((m.gap_fraction() - analytic).abs() <= cell * m.carved().len() as f64);
        assert!((m.gap_fraction() - 0.2).abs() < 0.005, "{}", m.gap_fraction());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = TerrainParams { gap_width_range: (1.2, 0.8), ..Default::default() };
        assert!(matches!(
            generate_terrain(TerrainKind::Gaps, &p, 0),
            Err(Error::InvalidParams(_))
        ));
        let p = TerrainParams { bump_amp_range: (-0.1, 0.05), ..Default::default() };
        assert!(matches!(
            generate_terrain(TerrainKind::Simple, &p, 0),
            Err(Error::InvalidParams(_))
        ));
        let p = TerrainParams { step_height: 0.0, ..Default::default() };
        assert!(matches!(
            generate_terrain(TerrainKind::Stairs, &p, 0),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn tiny_extent_cannot_fit_a_gap() {
        let p = TerrainParams {
            extent: (3.0, 3.0),
            spawn_zone: Rect::new(-1.0, -1.0, 1.0, 1.0),
            ..Default::default()
        };
        assert!(matches!(
            generate_terrain(TerrainKind::Gaps, &p, 0),
            Err(Error::ExtentTooSmall(_))
        ));
        let p = TerrainParams {
            extent: (2.1, 2.1),
            spawn_zone: Rect::new(-1.0, -1.0, 1.0, 1.0),
            ..Default::default()
        };
        assert!(matches!(
            generate_terrain(TerrainKind::Stairs, &p, 0),
            Err(Error::ExtentTooSmall(_))
        ));
    }

    #[test]
    fn obstacle_density_hits_target() {
        let m = generate_terrain(TerrainKind::Obstacles, &TerrainParams::default(), 2).unwrap();
        let covered = m.cells().iter().filter(|&&h| h > 0.0).count() as f64;
        let density = covered / m.cells().len() as f64;
        assert!((density - 0.15).abs() <= 0.02, "{density}");
        assert!(m.cells().iter().all(|&h| h == 0.0 || (0.1..=0.4).contains(&h)));
    }

    #[test]
    fn spawn_zone_is_flat_everywhere() {
        for kind in TerrainKind::ALL {
            let m = generate_terrain(kind, &TerrainParams::default(), 4).unwrap();
            for &(x, y) in &[(0.0, 0.0), (0.9, 0.9), (-0.9, 0.5), (0.95, -0.95)] {
                assert_eq!(m.height_at(x, y).unwrap(), 0.0, "{kind} at ({x},{y})");
            }
        }
    }

    #[test]
    fn height_at_cell_center_returns_stored_value() {
        let m = generate_terrain(TerrainKind::Simple, &TerrainParams::default(), 9).unwrap();
        for &(ix, iy) in &[(0, 0), (37, 200), (399, 399), (123, 4)] {
            let (x, y) = m.cell_center(ix, iy);
            assert!((m.height_at(x, y).unwrap() - m.cell(ix, iy)).abs() < 1e-15);
        }
    }

    #[test]
    fn height_at_interpolates_between_cells() {
        let mut m = flat(1.0, 0.1);
        let i = 5 * 10 + 3;
        m.cells[i] = 0.0;
        m.cells[i + 1] = 0.04;
        m.cells[i + 10] = 0.0;
        m.cells[i + 11] = 0.04;
        let (x0, y0) = m.cell_center(3, 5);
        let h = m.height_at(x0 + 0.05, y0).unwrap();
        assert!((h - 0.02).abs() < 1e-12, "{h}");
    }

    #[test]
    fn out_of_bounds_reports_the_point() {
        let m = flat(2.0, 0.1);
        match m.height_at(5.0, -0.2) {
            Err(Error::OutOfBounds { x, y }) => assert_eq!((x, y), (5.0, -0.2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(m.surface_normal(0.0, 3.0).is_err());
        assert_eq!(m.height_at_clamped(5.0, -0.2), 0.0);
    }

    #[test]
    fn flat_normal_points_up() {
        let m = flat(2.0, 0.1);
        assert_eq!(m.surface_normal(0.3, -0.4).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn ramp_normal_matches_analytic_gradient() {
        let mut m = flat(4.0, 0.05);
        let (nx, ny) = m.dims();
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, _) = m.cell_center(ix, iy);
                m.cells[iy * nx + ix] = x;
            }
        }
        let n = m.surface_normal(0.37, 0.21).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((n[0] + s).abs() < 1e-12 && n[1].abs() < 1e-12 && (n[2] - s).abs() < 1e-12, "{n:?}");
    }

    #[test]
    fn mirrored_terrain_mirrors_normal() {
        let m = generate_terrain(TerrainKind::Simple, &TerrainParams::default(), 21).unwrap();
        let (nx, ny) = m.dims();
        let mut mirrored = m.cells().to_vec();
        for iy in 0..ny {
            for ix in 0..nx {
                mirrored[iy * nx + ix] = m.cell(nx - 1 - ix, iy);
            }
        }
        let mm = TerrainMap::from_cells(
            m.kind(),
            m.params().clone(),
            0,
            mirrored,
            vec![false; nx * ny],
            vec![],
        )
        .unwrap();
        for &(x, y) in &[(3.3, 2.1), (-4.72, 0.5), (6.01, -7.7)] {
            let a = m.surface_normal(x, y).unwrap();
            let b = mm.surface_normal(-x, y).unwrap();
            assert!((a[0] + b[0]).abs() < 1e-9, "{a:?} vs {b:?}");
            assert!((a[1] - b[1]).abs() < 1e-9);
            assert!((a[2] - b[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let m = generate_terrain(TerrainKind::Simple, &TerrainParams::default(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        m.save(&path).unwrap();
        let back = TerrainMap::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
