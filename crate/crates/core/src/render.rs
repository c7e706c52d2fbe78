//! Trajectory rendering from a trace: binary PPM images and terminal ASCII.

use crate::coverage::{FovTable, TargetMap};
use crate::dynamics::Action;
use crate::error::{Error, Result};
use crate::grid::{parse_map, Cell, GridMap, MAP_MAGIC};
use crate::trace::TraceRecord;

/// Pass colours, cycled.
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [148, 103, 189],
    [23, 190, 207],
    [227, 119, 194],
];

#[derive(Debug, Clone)]
pub struct Scene {
    pub map: GridMap,
    pub targets0: Vec<Cell>,
    pub covered: TargetMap,
    /// Every position after the initial one, with its pass number.
    pub path: Vec<(Cell, usize)>,
    pub start: Cell,
    pub end: Cell,
}

impl Scene {
    /// Rebuilds the scene from a trace whose first record carries the map.
    pub fn from_trace(records: &[TraceRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::InvalidScenario("empty trace".into()))?;
        let rows = first
            .map
            .as_ref()
            .ok_or_else(|| Error::InvalidScenario("first trace record has no map".into()))?;
        let mut text = format!("{MAP_MAGIC}\nsize {}\n", rows.len());
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let map = parse_map(&text)?;
        let targets0 = first.targets.clone().unwrap_or_default();
        let table = FovTable::new(&map, first.fov.unwrap_or_default());
        let mut remaining = TargetMap::from_cells(&map, &targets0)?;
        let mut path = Vec::new();
        let mut pass = 0usize;
        for r in &records[1..] {
            if r.action == Some(Action::TakeOff) {
                pass += 1;
            }
            remaining.cover(&table, map.index(r.p));
            path.push((r.p, pass));
        }
        let done: Vec<Cell> = targets0
            .iter()
            .copied()
            .filter(|c| !remaining.contains_index(map.index(*c)))
            .collect();
        let covered = TargetMap::from_cells(&map, &done)?;
        Ok(Self {
            start: first.p,
            end: records.last().expect("non-empty").p,
            map,
            targets0,
            covered,
            path,
        })
    }

    /// North-up text picture. Path cells show their pass number modulo 10,
    /// `x` marks an uncovered target and `+` a covered one, `@` the final
    /// position.
    pub fn ascii(&self) -> String {
        let m = self.map.size();
        let mut grid: Vec<Vec<char>> = self.map.body_rows().iter().map(|r| r.chars().collect()).collect();
        for &t in &self.targets0 {
            let ch = if self.covered.contains_index(self.map.index(t)) { '+' } else { 'x' };
            grid[t.y as usize][t.x as usize] = ch;
        }
        for &(c, pass) in &self.path {
            if self.map.contains(c) {
                grid[c.y as usize][c.x as usize] = char::from_digit((pass % 10) as u32, 10).unwrap_or('*');
            }
        }
        if self.map.contains(self.end) {
            grid[self.end.y as usize][self.end.x as usize] = '@';
        }
        let mut out = String::with_capacity(m * (m + 1));
        for row in grid.iter().rev() {
            out.extend(row.iter());
            out.push('\n');
        }
        out
    }

    fn base_colour(&self, c: Cell) -> [u8; 3] {
        let i = self.map.index(c);
        let is_target = self.targets0.contains(&c);
        if self.map.is_landing(c) {
            [70, 90, 230]
        } else if self.map.is_high_obstacle(c) {
            [60, 60, 60]
        } else if self.map.is_obstacle(c) {
            [150, 150, 150]
        } else if self.map.is_nfz(c) {
            [235, 120, 120]
        } else if is_target && self.covered.contains_index(i) {
            [170, 230, 160]
        } else if is_target {
            [250, 225, 110]
        } else {
            [245, 245, 245]
        }
    }

    /// Binary PPM (P6), `scale` pixels per cell, north up. Each pass's path
    /// is drawn as a centred square in its own colour.
    pub fn ppm(&self, scale: usize) -> Vec<u8> {
        let m = self.map.size();
        let scale = scale.max(3);
        let side = m * scale;
        let mut px = vec![0u8; side * side * 3];
        let mut put = |x: usize, y_img: usize, rgb: [u8; 3]| {
            let o = (y_img * side + x) * 3;
            px[o..o + 3].copy_from_slice(&rgb);
        };
        for c in self.map.cells() {
            let rgb = self.base_colour(c);
            let row = m - 1 - c.y as usize;
            for dy in 0..scale {
                for dx in 0..scale {
                    let edge = dx == 0 || dy == 0;
                    let v = if edge { rgb.map(|v| v.saturating_sub(25)) } else { rgb };
                    put(c.x as usize * scale + dx, row * scale + dy, v);
                }
            }
        }
        let inset = scale / 3;
        let mut mark = |c: Cell, rgb: [u8; 3], inset: usize| {
            if !self.map.contains(c) {
                return;
            }
            let row = m - 1 - c.y as usize;
            for dy in inset..scale - inset {
                for dx in inset..scale - inset {
                    put(c.x as usize * scale + dx, row * scale + dy, rgb);
                }
            }
        };
        for &(c, pass) in &self.path {
            mark(c, PALETTE[pass % PALETTE.len()], inset);
        }
        mark(self.start, [0, 0, 0], scale / 2 - scale / 6);
        mark(self.end, [200, 0, 0], scale / 2 - scale / 6);
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        out.extend_from_slice(&px);
        out
    }
}
