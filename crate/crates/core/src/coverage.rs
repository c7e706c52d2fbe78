//! Coverage targets, camera visibility, and scenario sampling.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Cell, GridMap};

/// Which obstacles occlude the camera ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosBlocking {
    /// Every obstacle, low or high.
    #[default]
    AllObstacles,
    /// Only obstacles that are also no-fly zones.
    HighOnly,
}

/// Square field of view of side `2 * half_width + 1` with ray occlusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FovConfig {
    pub half_width: u32,
    pub los_blocking: LosBlocking,
}

impl Default for FovConfig {
    fn default() -> Self {
        Self {
            half_width: 2,
            los_blocking: LosBlocking::AllObstacles,
        }
    }
}

fn blocks(map: &GridMap, fov: &FovConfig, c: Cell) -> bool {
    match fov.los_blocking {
        LosBlocking::AllObstacles => map.is_obstacle(c),
        LosBlocking::HighOnly => map.is_high_obstacle(c),
    }
}

/// Calls `visit` for every cell the segment between the centres of `from`
/// and `to` touches, in order, excluding both endpoints. A segment passing
/// exactly through a grid corner touches both side cells.
pub fn supercover_between(from: Cell, to: Cell, mut visit: impl FnMut(Cell) -> bool) -> bool {
    let (dx, dy) = ((to.x - from.x).abs(), (to.y - from.y).abs());
    let (sx, sy) = ((to.x - from.x).signum(), (to.y - from.y).signum());
    let (mut x, mut y) = (from.x, from.y);
    let (mut ix, mut iy) = (0, 0);
    while ix < dx || iy < dy {
        let decision = (1 + 2 * ix) * dy - (1 + 2 * iy) * dx;
        if decision == 0 {
            if !visit(Cell::new(x + sx, y)) || !visit(Cell::new(x, y + sy)) {
                return false;
            }
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        } else if decision < 0 {
            x += sx;
            ix += 1;
        } else {
            y += sy;
            iy += 1;
        }
        let c = Cell::new(x, y);
        if c != to && !visit(c) {
            return false;
        }
    }
    true
}

/// Whether cell `x` is seen from position `p`.
pub fn visible(map: &GridMap, fov: &FovConfig, p: Cell, x: Cell) -> bool {
    if p == x {
        return true;
    }
    if !map.contains(x) || p.chebyshev(x) > fov.half_width as i32 {
        return false;
    }
    supercover_between(p, x, |c| !blocks(map, fov, c))
}

/// Precomputed visibility: for each cell, the row-major indices it sees.
/// Visibility is symmetric, so the same lists answer "seen from where".
#[derive(Debug, Clone)]
pub struct FovTable {
    fov: FovConfig,
    size: usize,
    offsets: Vec<u32>,
    visible: Vec<u32>,
}

impl FovTable {
    pub fn new(map: &GridMap, fov: FovConfig) -> Self {
        let r = fov.half_width as i32;
        let mut offsets = Vec::with_capacity(map.n_cells() + 1);
        let mut visible_cells = Vec::new();
        offsets.push(0);
        for p in map.cells() {
            for dy in -r..=r {
                for dx in -r..=r {
                    let x = p.offset(dx, dy);
                    if visible(map, &fov, p, x) {
                        visible_cells.push(map.index(x) as u32);
                    }
                }
            }
            offsets.push(visible_cells.len() as u32);
        }
        Self {
            fov,
            size: map.size(),
            offsets,
            visible: visible_cells,
        }
    }

    pub fn fov(&self) -> FovConfig {
        self.fov
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Indices of cells visible from cell index `p`.
    pub fn visible_from(&self, p: usize) -> &[u32] {
        &self.visible[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }
}

/// Remaining coverage targets plus the initial count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TargetMap {
    cells: Vec<bool>,
    remaining: usize,
    total0: usize,
}

impl TargetMap {
    pub fn empty(map: &GridMap) -> Self {
        Self {
            cells: vec![false; map.n_cells()],
            remaining: 0,
            total0: 0,
        }
    }

    /// Targets at `cells`. Obstacle cells are rejected.
    pub fn from_cells(map: &GridMap, cells: &[Cell]) -> Result<Self> {
        let mut t = Self::empty(map);
        for &c in cells {
            if !map.contains(c) {
                return Err(Error::InvalidScenario(format!("target {c} is off the map")));
            }
            if map.is_obstacle(c) {
                return Err(Error::InvalidScenario(format!("target {c} is an obstacle cell")));
            }
            let i = map.index(c);
            if !t.cells[i] {
                t.cells[i] = true;
                t.remaining += 1;
            }
        }
        t.total0 = t.remaining;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.remaining
    }

    pub fn is_empty(&self) -> bool {
        self.remaining == 0
    }

    pub fn total0(&self) -> usize {
        self.total0
    }

    pub fn contains_index(&self, i: usize) -> bool {
        self.cells[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.cells
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.cells.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }

    pub fn cells<'a>(&'a self, map: &'a GridMap) -> impl Iterator<Item = Cell> + 'a {
        self.indices().map(|i| map.cell(i))
    }

    /// Packed bitset, used as an exact hash key.
    pub fn bits(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.cells.len().div_ceil(64)];
        for i in self.indices() {
            words[i / 64] |= 1 << (i % 64);
        }
        words
    }

    /// Removes every target visible from cell index `p`; returns how many.
    pub fn cover(&mut self, table: &FovTable, p: usize) -> usize {
        let mut n = 0;
        for &x in table.visible_from(p) {
            let x = x as usize;
            if self.cells[x] {
                self.cells[x] = false;
                n += 1;
            }
        }
        self.remaining -= n;
        n
    }
}

/// The target set after the agent arrives at `p_next`.
pub fn update_targets(
    map: &GridMap,
    fov: &FovConfig,
    targets: &TargetMap,
    p_next: Cell,
) -> TargetMap {
    let mut next = targets.clone();
    for i in targets.indices() {
        if visible(map, fov, p_next, map.cell(i)) {
            next.cells[i] = false;
            next.remaining -= 1;
        }
    }
    next
}

/// Which coverage objective an episode follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Start landed; done when every target is seen and the agent is landed.
    #[default]
    Recharge,
    /// Start flying; the episode ends at the first landing.
    NoRecharge,
}

/// One episode instance.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub map: Arc<GridMap>,
    pub targets0: TargetMap,
    pub p0: Cell,
    pub b0: u32,
    pub l0: bool,
    pub timeout: u32,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.map, &other.map) || self.map == other.map)
            && self.targets0 == other.targets0
            && self.p0 == other.p0
            && self.b0 == other.b0
            && self.l0 == other.l0
            && self.timeout == other.timeout
    }
}

impl Scenario {
    /// Checks the spawn constraints against battery limits.
    pub fn validate(&self, b_max: u32, beta: f64) -> Result<()> {
        if !self.map.is_landing(self.p0) {
            return Err(Error::InvalidScenario(format!("p0 {} is not a landing cell", self.p0)));
        }
        let lo = min_initial_battery(b_max, beta);
        if self.b0 < lo || self.b0 > b_max {
            return Err(Error::InvalidScenario(format!(
                "b0 = {} outside [{lo}, {b_max}]",
                self.b0
            )));
        }
        if self.timeout == 0 {
            return Err(Error::InvalidScenario("timeout must be positive".into()));
        }
        Ok(())
    }
}

pub fn min_initial_battery(b_max: u32, beta: f64) -> u32 {
    (beta * b_max as f64 - 1e-9).ceil().max(0.0) as u32
}

/// Default per-map step cap: 30 steps per unit of map width.
pub fn default_timeout(map_size: usize) -> u32 {
    30 * map_size as u32
}

/// Random target-patch generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patches_range: [u32; 2],
    /// Patch side range for a 32-wide map; scaled linearly with map size.
    pub patch_side_range: [u32; 2],
    pub objective: Objective,
    pub max_retries: u32,
    /// Step cap; `None` uses [`default_timeout`].
    pub timeout: Option<u32>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patches_range: [1, 5],
            patch_side_range: [3, 8],
            objective: Objective::Recharge,
            max_retries: 64,
            timeout: None,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.n_patches_range;
        let [c, d] = self.patch_side_range;
        if a == 0 || a > b || c == 0 || c > d {
            return Err(Error::Config(
                "generator ranges must be positive and ordered".into(),
            ));
        }
        Ok(())
    }

    /// Side range after scaling to a map of width `m`.
    pub fn scaled_sides(&self, m: usize) -> (u32, u32) {
        let scale = m as f64 / 32.0;
        let lo = ((self.patch_side_range[0] as f64 * scale).round() as u32).clamp(1, m as u32);
        let hi = ((self.patch_side_range[1] as f64 * scale).round() as u32).clamp(lo, m as u32);
        (lo, hi)
    }
}

/// Union of random rectangles minus obstacle cells; `None` when empty.
pub fn sample_targets<R: Rng + ?Sized>(
    map: &GridMap,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Option<TargetMap> {
    let m = map.size() as u32;
    let (side_lo, side_hi) = cfg.scaled_sides(map.size());
    let n = rng.random_range(cfg.n_patches_range[0]..=cfg.n_patches_range[1]);
    let mut cells = Vec::new();
    for _ in 0..n {
        let w = rng.random_range(side_lo..=side_hi);
        let h = rng.random_range(side_lo..=side_hi);
        let x0 = rng.random_range(0..=m - w);
        let y0 = rng.random_range(0..=m - h);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let c = Cell::new(x as i32, y as i32);
                if !map.is_obstacle(c) {
                    cells.push(c);
                }
            }
        }
    }
    let t = TargetMap::from_cells(map, &cells).expect("obstacles filtered");
    (!t.is_empty()).then_some(t)
}

/// Deterministic scenario draw for `seed`.
pub fn generate_scenario(
    map: Arc<GridMap>,
    seed: u64,
    cfg: &GeneratorConfig,
    b_max: u32,
    beta: f64,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_scenario_with(map, &mut rng, cfg, b_max, beta)
}

pub fn generate_scenario_with<R: Rng + ?Sized>(
    map: Arc<GridMap>,
    rng: &mut R,
    cfg: &GeneratorConfig,
    b_max: u32,
    beta: f64,
) -> Result<Scenario> {
    let landing = map.landing_cells();
    if landing.is_empty() {
        return Err(Error::InvalidMap("map has no landing cells".into()));
    }
    let p0 = landing[rng.random_range(0..landing.len())];
    let b0 = rng.random_range(min_initial_battery(b_max, beta)..=b_max);
    let l0 = cfg.objective == Objective::Recharge;
    for _ in 0..cfg.max_retries.max(1) {
        if let Some(targets0) = sample_targets(&map, cfg, rng) {
            let timeout = cfg.timeout.unwrap_or_else(|| default_timeout(map.size()));
            return Ok(Scenario {
                map,
                targets0,
                p0,
                b0,
                l0,
                timeout,
            });
        }
    }
    Err(Error::EmptyTargets(cfg.max_retries.max(1) as usize))
}

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    /// Map file path, relative to the scenario file.
    pub map: PathBuf,
    pub targets: Vec<Cell>,
    pub p0: Cell,
    pub b0: u32,
    pub l0: bool,
    pub timeout: u32,
    pub seed: Option<u64>,
}

impl ScenarioFile {
    pub fn from_scenario(s: &Scenario, map_path: impl Into<PathBuf>, seed: Option<u64>) -> Self {
        Self {
            map: map_path.into(),
            targets: s.targets0.cells(&s.map).collect(),
            p0: s.p0,
            b0: s.b0,
            l0: s.l0,
            timeout: s.timeout,
            seed,
        }
    }

    pub fn into_scenario(self, map: Arc<GridMap>) -> Result<Scenario> {
        if !map.contains(self.p0) {
            return Err(Error::InvalidScenario(format!("p0 {} is off the map", self.p0)));
        }
        Ok(Scenario {
            targets0: TargetMap::from_cells(&map, &self.targets)?,
            map,
            p0: self.p0,
            b0: self.b0,
            l0: self.l0,
            timeout: self.timeout,
        })
    }
}

pub fn load_map(path: &Path) -> Result<GridMap> {
    let map = crate::grid::parse_map(&std::fs::read_to_string(path)?)?;
    if map.landing_cells().is_empty() {
        log::warn!(
            "{}: map has no landing cells; every cell is unreachable",
            path.display()
        );
    }
    Ok(map)
}

/// Reads a scenario JSON file and the map it references.
pub fn load_scenario(path: &Path) -> Result<(Scenario, ScenarioFile)> {
    let file: ScenarioFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let map_path = match path.parent() {
        Some(dir) if file.map.is_relative() => dir.join(&file.map),
        _ => file.map.clone(),
    };
    let map = Arc::new(load_map(&map_path)?);
    Ok((file.clone().into_scenario(map)?, file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_map;
    use proptest::prelude::*;

    fn map(rows: &[&str]) -> GridMap {
        let mut text = format!("cpp-map v1\nsize {}\n", rows.len());
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        parse_map(&text).unwrap()
    }

    fn fov(r: u32) -> FovConfig {
        FovConfig {
            half_width: r,
            los_blocking: LosBlocking::AllObstacles,
        }
    }

    #[test]
    fn own_cell_and_range() {
        let m = GridMap::empty(7);
        let p = Cell::new(3, 3);
        assert!(visible(&m, &fov(0), p, p));
        assert!(visible(&m, &fov(2), p, Cell::new(5, 1)));
        assert!(!visible(&m, &fov(2), p, Cell::new(6, 3)));
    }

    #[test]
    fn obstacle_occludes() {
        let m = map(&["Ll..", "....", "....", "...."]);
        let p = Cell::new(0, 0);
        assert!(!visible(&m, &fov(2), p, Cell::new(2, 0)));
        assert!(visible(&m, &fov(2), p, Cell::new(1, 0)));
        let high_only = FovConfig {
            half_width: 2,
            los_blocking: LosBlocking::HighOnly,
        };
        assert!(visible(&m, &high_only, p, Cell::new(2, 0)));
    }

    #[test]
    fn corner_crossing_touches_both_sides() {
        let mut seen = Vec::new();
        supercover_between(Cell::new(0, 0), Cell::new(2, 2), |c| {
            seen.push(c);
            true
        });
        assert_eq!(
            seen,
            vec![
                Cell::new(1, 0),
                Cell::new(0, 1),
                Cell::new(1, 1),
                Cell::new(2, 1),
                Cell::new(1, 2)
            ]
        );
    }

    #[test]
    fn nfz_target_covered_from_adjacent_cell() {
        let m = map(&["L...", ".Z..", "....", "...."]);
        let t = TargetMap::from_cells(&m, &[Cell::new(1, 1)]).unwrap();
        let next = update_targets(&m, &fov(1), &t, Cell::new(1, 0));
        assert!(next.is_empty());
        assert_eq!(next.total0(), 1);
    }

    #[test]
    fn empty_and_out_of_range_targets() {
        let m = GridMap::empty(8);
        let t = TargetMap::empty(&m);
        assert!(update_targets(&m, &fov(2), &t, Cell::new(0, 0)).is_empty());
        let t = TargetMap::from_cells(&m, &[Cell::new(7, 7), Cell::new(6, 7)]).unwrap();
        assert_eq!(update_targets(&m, &fov(2), &t, Cell::new(0, 0)), t);
    }

    #[test]
    fn targets_reject_obstacles() {
        let m = map(&["Ll", ".."]);
        assert!(TargetMap::from_cells(&m, &[Cell::new(1, 0)]).is_err());
    }

    #[test]
    fn fov_table_agrees_with_visible() {
        let m = map(&["L.l.", ".h..", "..Z.", "l..."]);
        let f = fov(2);
        let table = FovTable::new(&m, f);
        for p in m.cells() {
            let listed: Vec<u32> = table.visible_from(m.index(p)).to_vec();
            let direct: Vec<u32> = m
                .cells()
                .filter(|&x| visible(&m, &f, p, x))
                .map(|x| m.index(x) as u32)
                .collect();
            let mut listed_sorted = listed.clone();
            listed_sorted.sort();
            assert_eq!(listed_sorted, direct);
        }
    }

    #[test]
    fn patches_inside_obstacles_resample() {
        let mut rows = vec!["L".to_string() + &"l".repeat(7)];
        rows.extend((1..8).map(|_| "l".repeat(8)));
        let refs: Vec<&str> = rows.iter().map(String::as_str).collect();
        let m = Arc::new(map(&refs));
        let cfg = GeneratorConfig {
            max_retries: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Only the landing cell is not an obstacle, so most draws are empty.
        let draws: Vec<_> = (0..20).map(|_| sample_targets(&m, &cfg, &mut rng)).collect();
        assert!(draws.iter().any(Option::is_none));
        assert!(draws.iter().flatten().all(|t| t.len() == 1));

        let solid = Arc::new(map(&["Ll", "ll"]));
        let cfg = GeneratorConfig {
            patch_side_range: [1, 1],
            max_retries: 3,
            ..Default::default()
        };
        let mut hits = 0;
        for seed in 0..50 {
            match generate_scenario(solid.clone(), seed, &cfg, 100, 0.5) {
                Ok(s) => {
                    hits += 1;
                    assert_eq!(s.targets0.len(), 1);
                }
                Err(Error::EmptyTargets(3)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        assert!(hits > 0 && hits < 50);
    }

    #[test]
    fn scenario_is_deterministic() {
        let m = Arc::new(map(&["L.....", "......", "..l...", "......", "....L.", "......"]));
        let cfg = GeneratorConfig::default();
        let a = generate_scenario(m.clone(), 9, &cfg, 100, 0.5).unwrap();
        let b = generate_scenario(m.clone(), 9, &cfg, 100, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scenario_file_round_trip() {
        let m = Arc::new(map(&["L...", "....", "..Z.", "...."]));
        let s = generate_scenario(m.clone(), 4, &GeneratorConfig::default(), 100, 0.5).unwrap();
        let file = ScenarioFile::from_scenario(&s, "m.map", Some(4));
        let json = serde_json::to_string(&file).unwrap();
        let back: ScenarioFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back.clone().into_scenario(m).unwrap(), s);
        assert!(json.contains("\"p0\":[0,0]"));
    }

    #[test]
    fn sampling_respects_spawn_constraints() {
        let m = Arc::new(map(&["L....L", "......", "..l...", "......", "....L.", "......"]));
        let cfg = GeneratorConfig::default();
        for seed in 0..10_000u64 {
            let s = generate_scenario(m.clone(), seed, &cfg, 100, 0.5).unwrap();
            assert!(m.is_landing(s.p0));
            assert!((50..=100).contains(&s.b0));
            assert!(s.l0);
            assert!(s.targets0.indices().all(|i| !m.obstacle_layer()[i]));
            s.validate(100, 0.5).unwrap();
        }
    }

    /// Segment-versus-closed-square test on doubled coordinates.
    fn segment_touches(p: Cell, x: Cell, c: Cell) -> bool {
        let (ax, ay) = (2 * p.x as i64, 2 * p.y as i64);
        let (bx, by) = (2 * x.x as i64, 2 * x.y as i64);
        let (lo_x, hi_x) = (2 * c.x as i64 - 1, 2 * c.x as i64 + 1);
        let (lo_y, hi_y) = (2 * c.y as i64 - 1, 2 * c.y as i64 + 1);
        if ax.max(bx) < lo_x || ax.min(bx) > hi_x || ay.max(by) < lo_y || ay.min(by) > hi_y {
            return false;
        }
        let side = |qx: i64, qy: i64| ((bx - ax) * (qy - ay) - (by - ay) * (qx - ax)).signum();
        let s = [
            side(lo_x, lo_y),
            side(hi_x, lo_y),
            side(lo_x, hi_y),
            side(hi_x, hi_y),
        ];
        !(s.iter().all(|&v| v > 0) || s.iter().all(|&v| v < 0))
    }

    fn oracle_visible(m: &GridMap, f: &FovConfig, p: Cell, x: Cell) -> bool {
        if p == x {
            return true;
        }
        if p.chebyshev(x) > f.half_width as i32 {
            return false;
        }
        !m.cells()
            .filter(|&c| c != p && c != x)
            .any(|c| segment_touches(p, x, c) && blocks(m, f, c))
    }

    proptest! {
        #[test]
        fn visibility_matches_box_oracle(seed in 0u64..1000, px in 0i32..9, py in 0i32..9, qx in 0i32..9, qy in 0i32..9, r in 0u32..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = crate::grid::random_map(9, &crate::grid::RandomMapConfig { low_obstacle: 0.2, high_obstacle: 0.15, ..Default::default() }, &mut rng);
            let f = fov(r);
            let (p, x) = (Cell::new(px, py), Cell::new(qx, qy));
            prop_assert_eq!(visible(&m, &f, p, x), oracle_visible(&m, &f, p, x));
            prop_assert_eq!(visible(&m, &f, p, x), visible(&m, &f, x, p));
        }
    }
}
