//! Agent-centred global/local map observations and the position history.
//!
//! Tensors are row-major `[y][x][layer]` with row 0 at the south edge, and
//! layers ordered `[landing, nfz, obstacle, target, history]`.

use std::borrow::Cow;
use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::TargetMap;
use crate::dynamics::UavState;
use crate::error::{Error, Result};
use crate::grid::{Cell, GridMap};

pub const N_LAYERS: usize = 5;
pub const LAYER_LANDING: usize = 0;
pub const LAYER_NFZ: usize = 1;
pub const LAYER_OBSTACLE: usize = 2;
pub const LAYER_TARGET: usize = 3;
pub const LAYER_HISTORY: usize = 4;

/// Exponentially decaying visitation map.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionHistory {
    size: usize,
    values: Vec<f32>,
    alpha: f32,
}

impl PositionHistory {
    /// `1` at `p0`, `0` elsewhere.
    pub fn new(map: &GridMap, p0: Cell, alpha: f32) -> Self {
        let mut values = vec![0.0; map.n_cells()];
        values[map.index(p0)] = 1.0;
        Self {
            size: map.size(),
            values,
            alpha,
        }
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: Cell) -> f32 {
        self.values[c.y as usize * self.size + c.x as usize]
    }

    /// Decays every entry by `alpha`, then marks `p_next` with 1.
    pub fn update(&mut self, p_next: Cell) {
        for v in &mut self.values {
            *v *= self.alpha;
        }
        self.values[p_next.y as usize * self.size + p_next.x as usize] = 1.0;
    }
}

/// Functional form of [`PositionHistory::update`].
pub fn update_history(h: &PositionHistory, p_next: Cell) -> PositionHistory {
    let mut next = h.clone();
    next.update(p_next);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    #[default]
    History,
    None,
    /// Fresh uniform noise every step in place of the history layer.
    RandomLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationConfig {
    /// Global map downsampling factor.
    pub g: usize,
    /// Local crop side; odd.
    pub l: usize,
    pub history: HistoryMode,
    pub alpha: f32,
    pub pooling: Pooling,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            g: 3,
            l: 17,
            history: HistoryMode::History,
            alpha: 0.99,
            pooling: Pooling::Mean,
        }
    }
}

impl ObservationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 {
            return Err(Error::Config("global scale g must be >= 1".into()));
        }
        if self.l.is_multiple_of(2) {
            return Err(Error::Config(format!("local size l = {} must be odd", self.l)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} not in (0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn validate_for(&self, map_size: usize) -> Result<()> {
        self.validate()?;
        if self.l > 2 * map_size - 1 {
            return Err(Error::Config(format!(
                "local size l = {} exceeds 2m - 1 = {}",
                self.l,
                2 * map_size - 1
            )));
        }
        Ok(())
    }

    /// Spatial side of the global map for an `m x m` world.
    pub fn global_side(&self, map_size: usize) -> usize {
        (2 * map_size - 1).div_ceil(self.g)
    }
}

/// Dense `[rows][cols][channels]` f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.shape[1] + col) * self.shape[2] + ch]
    }

    fn at_mut(&mut self, row: usize, col: usize, ch: usize) -> &mut f32 {
        &mut self.data[(row * self.shape[1] + col) * self.shape[2] + ch]
    }

    pub fn layer_sum(&self, ch: usize) -> f64 {
        self.data
            .iter()
            .skip(ch)
            .step_by(self.shape[2])
            .map(|&v| v as f64)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub global: Tensor3,
    pub local: Tensor3,
    pub battery_norm: f32,
    pub landed: f32,
}

/// The history channel as it should appear for `mode`.
pub fn history_layer<'a, R: Rng + ?Sized>(
    mode: HistoryMode,
    history: &'a PositionHistory,
    rng: &mut R,
) -> Cow<'a, [f32]> {
    match mode {
        HistoryMode::History => Cow::Borrowed(history.values()),
        HistoryMode::None => Cow::Owned(vec![0.0; history.values().len()]),
        HistoryMode::RandomLayer => Cow::Owned(
            (0..history.values().len())
                .map(|_| rng.random::<f32>())
                .collect(),
        ),
    }
}

/// Agent-centred canvas of side `2m - 1`; cells beyond the map read as
/// obstacle and no-fly.
struct Canvas<'a> {
    map: &'a GridMap,
    targets: &'a TargetMap,
    history: &'a [f32],
    origin: Cell,
}

impl Canvas<'_> {
    fn fill(&self, row: i64, col: i64, out: &mut [f32; N_LAYERS]) {
        let c = Cell::new(self.origin.x + col as i32, self.origin.y + row as i32);
        if !self.map.contains(c) {
            *out = [0.0, 1.0, 1.0, 0.0, 0.0];
            return;
        }
        let i = self.map.index(c);
        *out = [
            self.map.landing_layer()[i] as u8 as f32,
            self.map.nfz_layer()[i] as u8 as f32,
            self.map.obstacle_layer()[i] as u8 as f32,
            self.targets.contains_index(i) as u8 as f32,
            self.history[i],
        ];
    }
}

pub fn build_observation(
    map: &GridMap,
    targets: &TargetMap,
    history_layer: &[f32],
    state: &UavState,
    b_max: u32,
    cfg: &ObservationConfig,
) -> Observation {
    let m = map.size();
    let mc = 2 * m - 1;
    let canvas = Canvas {
        map,
        targets,
        history: history_layer,
        origin: state.position.offset(-(m as i32 - 1), -(m as i32 - 1)),
    };
    let mut px = [0.0f32; N_LAYERS];

    let side = cfg.global_side(m);
    let g = cfg.g;
    let mut global = Tensor3::zeros([side, side, N_LAYERS]);
    let area = (g * g) as f32;
    for br in 0..side {
        for bc in 0..side {
            let mut acc = match cfg.pooling {
                Pooling::Mean => [0.0f32; N_LAYERS],
                Pooling::Max => [f32::NEG_INFINITY; N_LAYERS],
            };
            for r in br * g..(br + 1) * g {
                for c in bc * g..(bc + 1) * g {
                    canvas.fill(r as i64, c as i64, &mut px);
                    for k in 0..N_LAYERS {
                        match cfg.pooling {
                            Pooling::Mean => acc[k] += px[k],
                            Pooling::Max => acc[k] = acc[k].max(px[k]),
                        }
                    }
                }
            }
            for (k, v) in acc.iter().enumerate() {
                *global.at_mut(br, bc, k) = match cfg.pooling {
                    Pooling::Mean => v / area,
                    Pooling::Max => *v,
                };
            }
        }
    }

    let l = cfg.l;
    let start = (mc - l) as i64 / 2;
    let mut local = Tensor3::zeros([l, l, N_LAYERS]);
    for r in 0..l {
        for c in 0..l {
            canvas.fill(start + r as i64, start + c as i64, &mut px);
            for (k, v) in px.iter().enumerate() {
                *local.at_mut(r, c, k) = *v;
            }
        }
    }

    Observation {
        global,
        local,
        battery_norm: state.battery as f32 / b_max as f32,
        landed: state.landed as u8 as f32,
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct WireHeader {
    version: u32,
    dtype: String,
    global: [usize; 3],
    local: [usize; 3],
    scalars: usize,
}

impl Observation {
    /// One JSON header line, then global, local and the two scalars as
    /// little-endian f32.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header = WireHeader {
            version: 1,
            dtype: "f32le".into(),
            global: self.global.shape,
            local: self.local.shape,
            scalars: 2,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let scalars = [self.battery_norm, self.landed];
        for v in self.global.data.iter().chain(&self.local.data).chain(&scalars) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        out
    }

    pub fn read_from<R: io::BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: WireHeader = serde_json::from_str(line.trim_end())?;
        if header.version != 1 || header.dtype != "f32le" || header.scalars != 2 {
            return Err(Error::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                "unsupported observation header",
            )));
        }
        let mut read_vec = |n: usize| -> io::Result<Vec<f32>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect())
        };
        let global = read_vec(header.global.iter().product())?;
        let local = read_vec(header.local.iter().product())?;
        let scalars = read_vec(2)?;
        Ok(Self {
            global: Tensor3 {
                shape: header.global,
                data: global,
            },
            local: Tensor3 {
                shape: header.local,
                data: local,
            },
            battery_norm: scalars[0],
            landed: scalars[1],
        })
    }

    pub fn max_abs_diff(&self, other: &Observation) -> f32 {
        let g = self.global.data.iter().zip(&other.global.data);
        let l = self.local.data.iter().zip(&other.local.data);
        g.chain(l)
            .map(|(a, b)| (a - b).abs())
            .fold((self.battery_norm - other.battery_norm).abs(), f32::max)
            .max((self.landed - other.landed).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::parse_map;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn open(m: usize) -> GridMap {
        let mut text = format!("cpp-map v1\nsize {m}\n");
        for y in 0..m {
            let row: String = (0..m).map(|x| if x == 0 && y == 0 { 'L' } else { '.' }).collect();
            text.push_str(&row);
            text.push('\n');
        }
        parse_map(&text).unwrap()
    }

    fn obs(map: &GridMap, p: Cell, cfg: &ObservationConfig) -> Observation {
        let t = TargetMap::empty(map);
        let h = PositionHistory::new(map, p, cfg.alpha);
        let s = UavState::new(p, 50, false);
        build_observation(map, &t, h.values(), &s, 100, cfg)
    }

    #[test]
    fn history_basics() {
        let m = open(4);
        let p = Cell::new(1, 1);
        let mut h = PositionHistory::new(&m, p, 0.99);
        h.update(p);
        assert_eq!(h.get(p), 1.0);
        assert_eq!(h.values().iter().filter(|&&v| v != 0.0).count(), 1);

        let mut h = PositionHistory::new(&m, Cell::new(0, 0), 0.99);
        for c in [Cell::new(1, 0), Cell::new(2, 0), Cell::new(3, 0)] {
            h = update_history(&h, c);
        }
        assert!((h.get(Cell::new(0, 0)) - 0.970299).abs() < 1e-6);
        assert_eq!(h.values().iter().cloned().fold(0.0, f32::max), 1.0);
    }

    #[test]
    fn global_shape_at_defaults() {
        let cfg = ObservationConfig::default();
        assert_eq!(cfg.global_side(32), 21);
        let m = open(32);
        let o = obs(&m, Cell::new(5, 7), &cfg);
        assert_eq!(o.global.shape, [21, 21, 5]);
        assert_eq!(o.local.shape, [17, 17, 5]);
    }

    #[test]
    fn agent_sits_at_local_centre() {
        let mut text = String::from("cpp-map v1\nsize 5\n");
        for y in 0..5 {
            text.push_str(if y == 2 { "L.l..\n" } else { ".....\n" });
        }
        let m = parse_map(&text).unwrap();
        let cfg = ObservationConfig {
            l: 5,
            ..Default::default()
        };
        let o = obs(&m, Cell::new(1, 2), &cfg);
        assert_eq!(o.local.at(2, 2, LAYER_OBSTACLE), 0.0);
        assert_eq!(o.local.at(2, 2, LAYER_HISTORY), 1.0);
        assert_eq!(o.local.at(2, 3, LAYER_OBSTACLE), 1.0);
        assert_eq!(o.local.at(2, 1, LAYER_LANDING), 1.0);
    }

    #[test]
    fn corner_agent_sees_padding() {
        let m = open(8);
        let cfg = ObservationConfig {
            l: 9,
            ..Default::default()
        };
        let o = obs(&m, Cell::new(0, 0), &cfg);
        let padded = (0..9)
            .flat_map(|r| (0..9).map(move |c| (r, c)))
            .filter(|&(r, c)| o.local.at(r, c, LAYER_OBSTACLE) == 1.0 && o.local.at(r, c, LAYER_NFZ) == 1.0)
            .count();
        // Only the 5x5 quadrant north-east of the agent lies on the map.
        assert_eq!(padded, 81 - 25);
    }

    #[test]
    fn config_validation() {
        let cfg = ObservationConfig {
            l: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ObservationConfig::default();
        assert!(cfg.validate_for(8).is_err());
        assert!(cfg.validate_for(9).is_ok());
    }

    #[test]
    fn max_pooling_marks_any_padding() {
        let m = open(6);
        let cfg = ObservationConfig {
            l: 3,
            pooling: Pooling::Max,
            ..Default::default()
        };
        let o = obs(&m, Cell::new(0, 0), &cfg);
        assert!(o.global.data.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn random_layer_changes_every_call() {
        let m = open(4);
        let h = PositionHistory::new(&m, Cell::new(0, 0), 0.99);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = history_layer(HistoryMode::RandomLayer, &h, &mut rng).into_owned();
        let b = history_layer(HistoryMode::RandomLayer, &h, &mut rng).into_owned();
        assert_ne!(a, b);
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
        let z = history_layer(HistoryMode::None, &h, &mut rng);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wire_format_round_trip() {
        let m = open(5);
        let cfg = ObservationConfig {
            l: 5,
            g: 2,
            ..Default::default()
        };
        let o = obs(&m, Cell::new(3, 1), &cfg);
        let bytes = o.to_bytes();
        let newline = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = std::str::from_utf8(&bytes[..newline]).unwrap();
        assert_eq!(
            header,
            r#"{"version":1,"dtype":"f32le","global":[5,5,5],"local":[5,5,5],"scalars":2}"#
        );
        assert_eq!(bytes.len() - newline - 1, 4 * (125 + 125 + 2));
        assert_eq!(Observation::read_from(&bytes[..]).unwrap(), o);
    }

    proptest! {
        #[test]
        fn mean_pool_conserves_mass(m in 2usize..10, g in 1usize..5, x in 0i32..10, y in 0i32..10, seed: u64) {
            let (x, y) = (x % m as i32, y % m as i32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = crate::grid::random_map(m, &Default::default(), &mut rng);
            let targets = TargetMap::from_cells(&map, &map.cells().filter(|c| !map.is_obstacle(*c)).take(5).collect::<Vec<_>>()).unwrap();
            let h = PositionHistory::new(&map, Cell::new(x, y), 0.9);
            let cfg = ObservationConfig { g, l: 1, ..Default::default() };
            let s = UavState::new(Cell::new(x, y), 10, false);
            let o = build_observation(&map, &targets, h.values(), &s, 20, &cfg);
            let mc = 2 * m - 1;
            let side = mc.div_ceil(g);
            let extra = (side * g) * (side * g) - mc * mc;
            for k in 0..N_LAYERS {
                let map_mass = match k {
                    LAYER_LANDING => map.landing_layer().iter().filter(|&&v| v).count() as f64,
                    LAYER_NFZ => (mc * mc - m * m + map.nfz_layer().iter().filter(|&&v| v).count()) as f64,
                    LAYER_OBSTACLE => (mc * mc - m * m + map.obstacle_layer().iter().filter(|&&v| v).count()) as f64,
                    LAYER_TARGET => targets.len() as f64,
                    _ => 1.0,
                };
                let pad = if k == LAYER_NFZ || k == LAYER_OBSTACLE { extra as f64 } else { 0.0 };
                let pooled = o.global.layer_sum(k) * (g * g) as f64;
                prop_assert!((pooled - map_mass - pad).abs() < 1e-3, "layer {} {} vs {}", k, pooled, map_mass + pad);
            }
        }

        #[test]
        fn translation_equivariance(x in 1i32..7, y in 1i32..7) {
            let m = GridMap::empty(8);
            let cfg = ObservationConfig { l: 5, ..Default::default() };
            let a = obs(&m, Cell::new(x, y), &cfg);
            let b = obs(&m, Cell::new(x - 1, y), &cfg);
            // Away from the pad, the local view is shift-invariant on a uniform map.
            for r in 0..5 {
                for c in 0..5 {
                    let ca = Cell::new(x + c as i32 - 2, y + r as i32 - 2);
                    let cb = Cell::new(x - 1 + c as i32 - 2, y + r as i32 - 2);
                    if m.contains(ca) && m.contains(cb) {
                        for k in 0..LAYER_HISTORY {
                            prop_assert_eq!(a.local.at(r, c, k), b.local.at(r, c, k));
                        }
                    }
                }
            }
        }
    }
}
