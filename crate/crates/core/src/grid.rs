//! Static world model: obstacle, landing and no-fly layers, the map file
//! format, and breadth-first distance queries over flyable cells.
//!
//! Coordinates are `(x, y)` with `x` growing east and `y` growing north;
//! row `y = 0` is the southern edge and is the first body line of a map file.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

pub const MAP_MAGIC: &str = "cpp-map v1";

/// Unit offsets in action order: east, north, west, south.
pub const MOVES: [(i32, i32); 4] = [(1, 0), (0, 1), (-1, 0), (0, -1)];

/// A grid cell. Signed so that off-map neighbours are representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Cell {
    pub x: i32,
    pub y: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i32, dy: i32) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }

    pub fn chebyshev(self, other: Cell) -> i32 {
        (self.x - other.x).abs().max((self.y - other.y).abs())
    }

    pub fn manhattan(self, other: Cell) -> i32 {
        (self.x - other.x).abs() + (self.y - other.y).abs()
    }
}

impl From<[i32; 2]> for Cell {
    fn from([x, y]: [i32; 2]) -> Self {
        Cell::new(x, y)
    }
}

impl From<Cell> for [i32; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Square grid world described by three boolean layers.
///
/// A low obstacle is an obstacle only and can be overflown; a high obstacle
/// is both an obstacle and a no-fly zone. Landing cells are never obstacles
/// or no-fly zones.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    size: usize,
    obstacles: Vec<bool>,
    landing: Vec<bool>,
    nfz: Vec<bool>,
    /// Cell edge length. Metadata only.
    pub cell_width: f64,
    /// Cruise altitude. Metadata only.
    pub altitude: f64,
}

impl GridMap {
    /// Builds a map from row-major layers (`index = y * size + x`).
    pub fn from_layers(
        size: usize,
        obstacles: Vec<bool>,
        landing: Vec<bool>,
        nfz: Vec<bool>,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidMap("map size must be positive".into()));
        }
        let n = size * size;
        for (name, layer) in [("obstacle", &obstacles), ("landing", &landing), ("nfz", &nfz)] {
            if layer.len() != n {
                return Err(Error::InvalidMap(format!(
                    "{name} layer has {} cells, expected {n}",
                    layer.len()
                )));
            }
        }
        if let Some(i) = (0..n).find(|&i| landing[i] && (obstacles[i] || nfz[i])) {
            return Err(Error::InvalidMap(format!(
                "landing cell ({}, {}) is also an obstacle or no-fly zone",
                i % size,
                i / size
            )));
        }
        Ok(Self {
            size,
            obstacles,
            landing,
            nfz,
            cell_width: 1.0,
            altitude: 1.0,
        })
    }

    /// An `m x m` map with no obstacles, no-fly zones or landing cells.
    pub fn empty(size: usize) -> Self {
        let n = size * size;
        Self::from_layers(size, vec![false; n], vec![false; n], vec![false; n])
            .expect("empty map is valid")
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_cells(&self) -> usize {
        self.size * self.size
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x >= 0 && c.y >= 0 && (c.x as usize) < self.size && (c.y as usize) < self.size
    }

    /// Row-major index of an in-bounds cell.
    pub fn index(&self, c: Cell) -> usize {
        debug_assert!(self.contains(c), "cell {c} out of bounds");
        c.y as usize * self.size + c.x as usize
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell::new((index % self.size) as i32, (index / self.size) as i32)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.n_cells()).map(|i| self.cell(i))
    }

    pub fn is_obstacle(&self, c: Cell) -> bool {
        self.contains(c) && self.obstacles[self.index(c)]
    }

    pub fn is_landing(&self, c: Cell) -> bool {
        self.contains(c) && self.landing[self.index(c)]
    }

    /// No-fly test. Cells outside the map count as no-fly.
    pub fn is_nfz(&self, c: Cell) -> bool {
        !self.contains(c) || self.nfz[self.index(c)]
    }

    pub fn is_high_obstacle(&self, c: Cell) -> bool {
        self.contains(c) && self.obstacles[self.index(c)] && self.nfz[self.index(c)]
    }

    pub fn obstacle_layer(&self) -> &[bool] {
        &self.obstacles
    }

    pub fn landing_layer(&self) -> &[bool] {
        &self.landing
    }

    pub fn nfz_layer(&self) -> &[bool] {
        &self.nfz
    }

    pub fn landing_cells(&self) -> Vec<Cell> {
        self.cells().filter(|&c| self.is_landing(c)).collect()
    }

    /// In-bounds, non-NFZ 4-neighbours in move order.
    pub fn flyable_neighbours(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        MOVES
            .iter()
            .map(move |&(dx, dy)| c.offset(dx, dy))
            .filter(move |&n| !self.is_nfz(n))
    }

    fn glyph(&self, i: usize) -> char {
        match (self.obstacles[i], self.landing[i], self.nfz[i]) {
            (_, true, _) => 'L',
            (true, _, true) => 'h',
            (true, _, false) => 'l',
            (false, _, true) => 'Z',
            (false, _, false) => '.',
        }
    }

    /// Serializes to the map file format.
    pub fn to_text(&self) -> String {
        let mut out = format!("{MAP_MAGIC}\nsize {}\n", self.size);
        if self.cell_width != 1.0 {
            out.push_str(&format!("cell_width {}\n", self.cell_width));
        }
        if self.altitude != 1.0 {
            out.push_str(&format!("altitude {}\n", self.altitude));
        }
        for row in self.body_rows() {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    /// Body rows in file order (row `y = 0` first).
    pub fn body_rows(&self) -> Vec<String> {
        (0..self.size)
            .map(|y| (0..self.size).map(|x| self.glyph(y * self.size + x)).collect())
            .collect()
    }
}

impl FromStr for GridMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_map(s)
    }
}

/// Parses the plain-text map format.
///
/// ```text
/// cpp-map v1
/// size 3
/// L..
/// .l.
/// ..h
/// ```
///
/// Optional `cell_width <c>` and `altitude <h>` lines may follow `size`.
pub fn parse_map(text: &str) -> Result<GridMap> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));

    match lines.next() {
        Some((_, l)) if l.trim() == MAP_MAGIC => {}
        Some((n, l)) => {
            return Err(ParseError::Header {
                line: n,
                msg: format!("expected `{MAP_MAGIC}`, found `{l}`"),
            }
            .into())
        }
        None => {
            return Err(ParseError::Header {
                line: 1,
                msg: "empty map file".into(),
            }
            .into())
        }
    }

    let size = match lines.next() {
        Some((n, l)) => {
            let mut parts = l.split_whitespace();
            match (parts.next(), parts.next().map(str::parse::<usize>), parts.next()) {
                (Some("size"), Some(Ok(m)), None) if m > 0 => m,
                _ => {
                    return Err(ParseError::Header {
                        line: n,
                        msg: format!("expected `size <m>` with m > 0, found `{l}`"),
                    }
                    .into())
                }
            }
        }
        None => {
            return Err(ParseError::Header {
                line: 2,
                msg: "missing `size` line".into(),
            }
            .into())
        }
    };

    let mut cell_width = 1.0;
    let mut altitude = 1.0;
    let n = size * size;
    let mut obstacles = vec![false; n];
    let mut landing = vec![false; n];
    let mut nfz = vec![false; n];
    let mut rows = 0usize;

    for (line_no, line) in lines {
        if rows == 0 && line.contains(' ') {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let value = parts.next().and_then(|v| v.parse::<f64>().ok());
            match (key, value) {
                ("cell_width", Some(v)) => cell_width = v,
                ("altitude", Some(v)) => altitude = v,
                _ => {
                    return Err(ParseError::Header {
                        line: line_no,
                        msg: format!("unrecognized header line `{line}`"),
                    }
                    .into())
                }
            }
            continue;
        }
        if line.is_empty() && rows == size {
            continue;
        }
        if rows == size {
            return Err(ParseError::RowCount {
                expected: size,
                found: rows + 1,
            }
            .into());
        }
        let chars: Vec<char> = line.chars().collect();
        if chars.len() != size {
            return Err(ParseError::RowLength {
                line: line_no,
                expected: size,
                found: chars.len(),
            }
            .into());
        }
        for (x, ch) in chars.into_iter().enumerate() {
            let i = rows * size + x;
            match ch {
                '.' => {}
                'L' => landing[i] = true,
                'Z' => nfz[i] = true,
                'l' => obstacles[i] = true,
                'h' => {
                    obstacles[i] = true;
                    nfz[i] = true;
                }
                other => {
                    return Err(ParseError::Cell {
                        line: line_no,
                        col: x + 1,
                        msg: format!("unknown cell character `{other}`"),
                    }
                    .into())
                }
            }
        }
        rows += 1;
    }
    if rows != size {
        return Err(ParseError::RowCount {
            expected: size,
            found: rows,
        }
        .into());
    }

    let mut map = GridMap::from_layers(size, obstacles, landing, nfz)?;
    map.cell_width = cell_width;
    map.altitude = altitude;
    Ok(map)
}

pub const UNREACHABLE: u32 = u32::MAX;

/// Per-cell step distance to the nearest landing cell, counting the landing
/// action itself (landing cells hold 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    size: usize,
    d: Vec<u32>,
}

impl DistanceField {
    pub fn from_raw(size: usize, d: Vec<u32>) -> Self {
        assert_eq!(d.len(), size * size);
        Self { size, d }
    }

    /// Distance at `c`; `None` when unreachable or off-map.
    pub fn get(&self, c: Cell) -> Option<u32> {
        if c.x < 0 || c.y < 0 || c.x as usize >= self.size || c.y as usize >= self.size {
            return None;
        }
        match self.d[c.y as usize * self.size + c.x as usize] {
            UNREACHABLE => None,
            v => Some(v),
        }
    }

    pub fn raw(&self) -> &[u32] {
        &self.d
    }
}

/// Multi-source BFS seeded at every landing cell with value 1. No-fly cells
/// are never entered.
pub fn landing_distance_field(map: &GridMap) -> DistanceField {
    let mut d = vec![UNREACHABLE; map.n_cells()];
    let mut queue = VecDeque::new();
    for c in map.landing_cells() {
        d[map.index(c)] = 1;
        queue.push_back(c);
    }
    while let Some(c) = queue.pop_front() {
        let next = d[map.index(c)] + 1;
        for n in map.flyable_neighbours(c) {
            let j = map.index(n);
            if d[j] == UNREACHABLE {
                d[j] = next;
                queue.push_back(n);
            }
        }
    }
    DistanceField { size: map.size(), d }
}

/// Single-source BFS over flyable cells. Returns per-cell step counts
/// (`UNREACHABLE` where disconnected) and BFS parents for path recovery.
pub fn bfs(map: &GridMap, from: Cell) -> BfsTree {
    let n = map.n_cells();
    let mut dist = vec![UNREACHABLE; n];
    let mut parent = vec![usize::MAX; n];
    if !map.is_nfz(from) {
        let s = map.index(from);
        dist[s] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(c) = queue.pop_front() {
            let i = map.index(c);
            for nb in map.flyable_neighbours(c) {
                let j = map.index(nb);
                if dist[j] == UNREACHABLE {
                    dist[j] = dist[i] + 1;
                    parent[j] = i;
                    queue.push_back(nb);
                }
            }
        }
    }
    BfsTree {
        size: map.size(),
        dist,
        parent,
    }
}

#[derive(Debug, Clone)]
pub struct BfsTree {
    size: usize,
    dist: Vec<u32>,
    parent: Vec<usize>,
}

impl BfsTree {
    pub fn distance(&self, to: Cell) -> Option<u32> {
        self.index(to).and_then(|i| match self.dist[i] {
            UNREACHABLE => None,
            v => Some(v),
        })
    }

    pub fn distances(&self) -> &[u32] {
        &self.dist
    }

    fn index(&self, c: Cell) -> Option<usize> {
        (c.x >= 0 && c.y >= 0 && (c.x as usize) < self.size && (c.y as usize) < self.size)
            .then(|| c.y as usize * self.size + c.x as usize)
    }

    /// Cells from the source to `to`, both endpoints included.
    pub fn path_to(&self, to: Cell) -> Option<Vec<Cell>> {
        let mut i = self.index(to)?;
        if self.dist[i] == UNREACHABLE {
            return None;
        }
        let mut cells = Vec::with_capacity(self.dist[i] as usize + 1);
        loop {
            cells.push(Cell::new((i % self.size) as i32, (i / self.size) as i32));
            if self.dist[i] == 0 {
                break;
            }
            i = self.parent[i];
        }
        cells.reverse();
        Some(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShortestPath {
    pub steps: u32,
    pub cells: Vec<Cell>,
}

/// Minimal 4-neighbour route avoiding no-fly cells. `None` when `to` is a
/// no-fly cell or disconnected from `from`.
pub fn shortest_path(map: &GridMap, from: Cell, to: Cell) -> Option<ShortestPath> {
    if map.is_nfz(from) || map.is_nfz(to) {
        return None;
    }
    let tree = bfs(map, from);
    let cells = tree.path_to(to)?;
    Some(ShortestPath {
        steps: cells.len() as u32 - 1,
        cells,
    })
}

/// Densities for [`random_map`].
#[derive(Debug, Clone, Copy)]
pub struct RandomMapConfig {
    pub low_obstacle: f64,
    pub high_obstacle: f64,
    pub nfz: f64,
    pub landing_cells: usize,
}

impl Default for RandomMapConfig {
    fn default() -> Self {
        Self {
            low_obstacle: 0.1,
            high_obstacle: 0.1,
            nfz: 0.08,
            landing_cells: 3,
        }
    }
}

/// Independent per-cell sampling plus a handful of landing cells. Used for
/// property tests and benchmarks; connectivity is not guaranteed.
pub fn random_map<R: Rng + ?Sized>(size: usize, cfg: &RandomMapConfig, rng: &mut R) -> GridMap {
    let n = size * size;
    let mut obstacles = vec![false; n];
    let mut landing = vec![false; n];
    let mut nfz = vec![false; n];
    for i in 0..n {
        let u: f64 = rng.random();
        if u < cfg.high_obstacle {
            obstacles[i] = true;
            nfz[i] = true;
        } else if u < cfg.high_obstacle + cfg.low_obstacle {
            obstacles[i] = true;
        } else if u < cfg.high_obstacle + cfg.low_obstacle + cfg.nfz {
            nfz[i] = true;
        }
    }
    for _ in 0..cfg.landing_cells.max(1) {
        let i = rng.random_range(0..n);
        obstacles[i] = false;
        nfz[i] = false;
        landing[i] = true;
    }
    GridMap::from_layers(size, obstacles, landing, nfz).expect("landing cells cleared")
}
