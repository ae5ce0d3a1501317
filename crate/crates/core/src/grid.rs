//! Road grid layout.
//!
//! Each intersection is a 12x12 block with one two-cell-wide road per axis.
//! Traffic keeps to the left: northbound uses column 5, southbound column 6,
//! eastbound row 6 and westbound row 5 (y grows northwards). The four cells
//! where the roads cross form the intersection box; the first box cell on
//! each inbound lane is that heading's stop line. Blocks are tiled 1x1, 2x1
//! or 2x2 with the roads joined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOCK: u32 = 12;
/// Watched cells per inbound approach.
pub const APPROACH_LEN: u32 = 5;
/// Lane offsets inside a block.
const LANE_LOW: u32 = 5;
const LANE_HIGH: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPos {
    pub x: u32,
    pub y: u32,
}

impl GridPos {
    pub const fn new(x: u32, y: u32) -> Self {
        GridPos { x, y }
    }

    pub fn chebyshev(self, other: GridPos) -> u32 {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North,
    South,
    East,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::South, Heading::East, Heading::West];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, 1),
            Heading::South => (0, -1),
            Heading::East => (1, 0),
            Heading::West => (-1, 0),
        }
    }

    pub fn is_east_west(self) -> bool {
        matches!(self, Heading::East | Heading::West)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    OffRoad,
    Road(Heading),
    /// First intersection cell on an inbound lane; entering it requires a
    /// green light for `heading`.
    StopLine {
        heading: Heading,
        light_id: usize,
    },
}

impl CellKind {
    pub fn is_drivable(self) -> bool {
        !matches!(self, CellKind::OffRoad)
    }
}

/// Static road layout shared by all agents.
#[derive(Debug, Clone)]
pub struct Grid {
    width: u32,
    height: u32,
    cells: Vec<CellKind>,
    cols: u32,
    rows: u32,
}

/// A watched approach cell: which intersection and heading it feeds, and its
/// rank counted from the stop line (0 = adjacent to the stop line).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchedCell {
    pub intersection: usize,
    pub heading: Heading,
    pub rank: u32,
    pub pos: GridPos,
}

impl Grid {
    pub fn new(intersections: u32) -> Result<Self> {
        let (cols, rows) = match intersections {
            1 => (1, 1),
            2 => (2, 1),
            4 => (2, 2),
            n => {
                return Err(Error::config(
                    "intersections",
                    format!("supported layouts are 1, 2 or 4 (got {n})"),
                ))
            }
        };
        let width = cols * BLOCK;
        let height = rows * BLOCK;
        let mut grid = Grid {
            width,
            height,
            cells: vec![CellKind::OffRoad; (width * height) as usize],
            cols,
            rows,
        };
        for x in 0..width {
            for y in 0..height {
                let (lx, ly) = (x % BLOCK, y % BLOCK);
                let kind = if lx == LANE_LOW && ly == LANE_LOW {
                    grid.stop_line(x, y, Heading::North)
                } else if lx == LANE_HIGH && ly == LANE_HIGH {
                    grid.stop_line(x, y, Heading::South)
                } else if lx == LANE_LOW && ly == LANE_HIGH {
                    grid.stop_line(x, y, Heading::East)
                } else if lx == LANE_HIGH && ly == LANE_LOW {
                    grid.stop_line(x, y, Heading::West)
                } else if lx == LANE_LOW {
                    CellKind::Road(Heading::North)
                } else if lx == LANE_HIGH {
                    CellKind::Road(Heading::South)
                } else if ly == LANE_HIGH {
                    CellKind::Road(Heading::East)
                } else if ly == LANE_LOW {
                    CellKind::Road(Heading::West)
                } else {
                    CellKind::OffRoad
                };
                let idx = grid.index(GridPos::new(x, y));
                grid.cells[idx] = kind;
            }
        }
        Ok(grid)
    }

    fn stop_line(&self, x: u32, y: u32, heading: Heading) -> CellKind {
        let intersection = self.intersection_of(GridPos::new(x, y));
        CellKind::StopLine {
            heading,
            light_id: intersection * 4 + heading.index(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn intersection_count(&self) -> usize {
        (self.cols * self.rows) as usize
    }

    pub fn contains(&self, pos: GridPos) -> bool {
        pos.x < self.width && pos.y < self.height
    }

    pub fn index(&self, pos: GridPos) -> usize {
        debug_assert!(self.contains(pos));
        (pos.y * self.width + pos.x) as usize
    }

    pub fn cell(&self, pos: GridPos) -> CellKind {
        self.cells[self.index(pos)]
    }

    /// Intersection (block) a cell belongs to, row-major from the south-west.
    pub fn intersection_of(&self, pos: GridPos) -> usize {
        ((pos.y / BLOCK) * self.cols + pos.x / BLOCK) as usize
    }

    /// Next cell along `heading`, or `None` when it leaves the grid.
    pub fn step(&self, pos: GridPos, heading: Heading) -> Option<GridPos> {
        let (dx, dy) = heading.delta();
        let x = i64::from(pos.x) + dx;
        let y = i64::from(pos.y) + dy;
        if x < 0 || y < 0 || x >= i64::from(self.width) || y >= i64::from(self.height) {
            None
        } else {
            Some(GridPos::new(x as u32, y as u32))
        }
    }

    /// The stop line cell for `heading` at `intersection`.
    pub fn stop_line_pos(&self, intersection: usize, heading: Heading) -> GridPos {
        let ox = (intersection as u32 % self.cols) * BLOCK;
        let oy = (intersection as u32 / self.cols) * BLOCK;
        let (lx, ly) = match heading {
            Heading::North => (LANE_LOW, LANE_LOW),
            Heading::South => (LANE_HIGH, LANE_HIGH),
            Heading::East => (LANE_LOW, LANE_HIGH),
            Heading::West => (LANE_HIGH, LANE_LOW),
        };
        GridPos::new(ox + lx, oy + ly)
    }

    /// The five inbound cells upstream of each stop line, ordered by
    /// intersection, heading (N, S, E, W), then distance from the stop line.
    pub fn watched_cells(&self) -> Vec<WatchedCell> {
        let mut out = Vec::with_capacity(self.intersection_count() * 20);
        for intersection in 0..self.intersection_count() {
            for heading in Heading::ALL {
                let stop = self.stop_line_pos(intersection, heading);
                let back = match heading {
                    Heading::North => Heading::South,
                    Heading::South => Heading::North,
                    Heading::East => Heading::West,
                    Heading::West => Heading::East,
                };
                let mut pos = stop;
                for rank in 0..APPROACH_LEN {
                    pos = self
                        .step(pos, back)
                        .expect("approach lies inside the block");
                    out.push(WatchedCell {
                        intersection,
                        heading,
                        rank,
                        pos,
                    });
                }
            }
        }
        out
    }

    /// Inbound lane cells on the outer edge of the grid, where vehicles enter.
    pub fn entry_cells(&self) -> Vec<(GridPos, Heading)> {
        let mut out = Vec::new();
        for x in 0..self.width {
            let bottom = GridPos::new(x, 0);
            if self.lane_heading(bottom) == Some(Heading::North) {
                out.push((bottom, Heading::North));
            }
            let top = GridPos::new(x, self.height - 1);
            if self.lane_heading(top) == Some(Heading::South) {
                out.push((top, Heading::South));
            }
        }
        for y in 0..self.height {
            let left = GridPos::new(0, y);
            if self.lane_heading(left) == Some(Heading::East) {
                out.push((left, Heading::East));
            }
            let right = GridPos::new(self.width - 1, y);
            if self.lane_heading(right) == Some(Heading::West) {
                out.push((right, Heading::West));
            }
        }
        out
    }

    fn lane_heading(&self, pos: GridPos) -> Option<Heading> {
        match self.cell(pos) {
            CellKind::Road(h) => Some(h),
            _ => None,
        }
    }
}
