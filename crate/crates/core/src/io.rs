//! Text formats: measurement streams and trajectory CSV.
//!
//! Measurement grammar, one record per line, `#` starts a comment:
//!
//! ```text
//! LAYOUT linear|pose|full|<p> <v> <b>
//! GPS     j zx zy                       | s11 s12 s22
//! BETWEEN j dx dy [dθ]                  | upper triangle, row by row
//! MOTION  j dt dpx dpy dvx dvy [db]     | upper triangle, row by row
//! ```
//!
//! Without a `LAYOUT` line the layout is inferred: heading if any between
//! record has three values, velocity if any motion record exists, bias if a
//! motion record has five values.

use std::fmt::Write as _;

use crate::blockla::format_g;
use crate::error::{Error, Result};
use crate::factors::{
    sym_from_upper, upper_of, BetweenFactor, Factor, GpsFactor, KeyframeState, MotionFactor, StateLayout,
};
use crate::graph::ChainFactorGraph;
use crate::metrics::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// 1-based source line.
    pub line: usize,
    pub factor: Factor,
}

impl Record {
    /// Newest keyframe the record refers to.
    pub fn key(&self) -> usize {
        self.factor.keyframes().into_iter().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub layout: StateLayout,
    pub records: Vec<Record>,
}

impl MeasurementSet {
    pub fn keyframes(&self) -> usize {
        self.records.iter().map(|r| r.key()).max().unwrap_or(0)
    }

    pub fn to_graph(&self) -> ChainFactorGraph {
        let mut g = ChainFactorGraph::new(self.layout, self.keyframes());
        for r in &self.records {
            g.add(r.factor.clone());
        }
        g
    }
}

fn perr(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        line,
        reason: reason.into(),
    }
}

fn nums(line: usize, toks: &[&str]) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| perr(line, format!("not a number: {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(line, format!("non-finite value {t:?}")))
            }
        })
        .collect()
}

struct RawRecord {
    line: usize,
    kind: String,
    index: usize,
    values: Vec<f64>,
    sigma: Vec<f64>,
}

pub fn parse_measurements(text: &str) -> Result<MeasurementSet> {
    let mut layout: Option<StateLayout> = None;
    let mut raws = Vec::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (head, sigma) = match content.split_once('|') {
            Some((h, s)) => (h.trim(), Some(s.trim())),
            None => (content, None),
        };
        let toks: Vec<&str> = head.split_whitespace().collect();
        let kind = toks[0].to_ascii_uppercase();
        if kind == "LAYOUT" {
            if sigma.is_some() {
                return Err(perr(line, "LAYOUT takes no covariance"));
            }
            if layout.is_some() {
                return Err(perr(line, "duplicate LAYOUT"));
            }
            if !raws.is_empty() {
                return Err(perr(line, "LAYOUT must precede the records"));
            }
            layout = Some(StateLayout::parse(&toks[1..].join(" ")).map_err(|e| perr(line, e.to_string()))?);
            continue;
        }
        if !matches!(kind.as_str(), "GPS" | "BETWEEN" | "MOTION") {
            return Err(perr(line, format!("unknown record type {:?}", toks[0])));
        }
        let sigma = sigma.ok_or_else(|| perr(line, "missing '|' before the covariance"))?;
        if toks.len() < 2 {
            return Err(perr(line, "missing keyframe index"));
        }
        let index: usize = toks[1]
            .parse()
            .map_err(|_| perr(line, format!("bad keyframe index {:?}", toks[1])))?;
        if index == 0 {
            return Err(perr(line, "keyframe indices start at 1"));
        }
        let values = nums(line, &toks[2..])?;
        let sigma = nums(line, &sigma.split_whitespace().collect::<Vec<_>>())?;
        raws.push(RawRecord {
            line,
            kind,
            index,
            values,
            sigma,
        });
    }

    let layout = match layout {
        Some(l) => l,
        None => {
            let heading = raws.iter().any(|r| r.kind == "BETWEEN" && r.values.len() == 3);
            let motion = raws.iter().any(|r| r.kind == "MOTION");
            let bias = raws.iter().any(|r| r.kind == "MOTION" && r.values.len() == 6);
            StateLayout::new(if heading { 3 } else { 2 }, if motion { 2 } else { 0 }, bias as usize)
                .map_err(|e| perr(0, e.to_string()))?
        }
    };

    let mut records = Vec::with_capacity(raws.len());
    for r in raws {
        let line = r.line;
        let expect = |n: usize, what: &str| -> Result<()> {
            if r.values.len() != n {
                return Err(perr(line, format!("{what} needs {n} values for layout {layout}, got {}", r.values.len())));
            }
            Ok(())
        };
        let factor = match r.kind.as_str() {
            "GPS" => {
                expect(2, "GPS")?;
                Factor::Gps(GpsFactor {
                    index: r.index,
                    z: [r.values[0], r.values[1]],
                    sigma: sym_from_upper(2, &r.sigma).map_err(|e| perr(line, e.to_string()))?,
                })
            }
            "BETWEEN" => {
                let dim = layout.between_dim();
                expect(dim, "BETWEEN")?;
                Factor::Between(BetweenFactor {
                    index: r.index,
                    z: r.values,
                    sigma: sym_from_upper(dim, &r.sigma).map_err(|e| perr(line, e.to_string()))?,
                })
            }
            _ => {
                if !layout.has_velocity() {
                    return Err(perr(line, format!("MOTION record in layout {layout} without velocity")));
                }
                let dim = layout.motion_dim();
                expect(dim + 1, "MOTION")?;
                Factor::Motion(MotionFactor {
                    index: r.index,
                    dt: r.values[0],
                    z: r.values[1..].to_vec(),
                    sigma: sym_from_upper(dim, &r.sigma).map_err(|e| perr(line, e.to_string()))?,
                })
            }
        };
        factor.check(layout).map_err(|e| perr(line, e.to_string()))?;
        factor.whitening().map_err(|e| perr(line, e.to_string()))?;
        records.push(Record { line, factor });
    }
    Ok(MeasurementSet { layout, records })
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| format_g(*v, 17)).collect::<Vec<_>>().join(" ")
}

/// Writes every factor in stacking order.
pub fn write_measurements(graph: &ChainFactorGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "LAYOUT {}", graph.layout);
    for f in graph.factors() {
        match &f {
            Factor::Gps(g) => {
                let _ = writeln!(s, "GPS {} {} | {}", g.index, join(&g.z), join(&upper_of(&g.sigma)));
            }
            Factor::Between(b) => {
                let _ = writeln!(s, "BETWEEN {} {} | {}", b.index, join(&b.z), join(&upper_of(&b.sigma)));
            }
            Factor::Motion(m) => {
                let mut v = vec![m.dt];
                v.extend_from_slice(&m.z);
                let _ = writeln!(s, "MOTION {} {} | {}", m.index, join(&v), join(&upper_of(&m.sigma)));
            }
        }
    }
    s
}

/// `index,x,y,theta` plus `vx,vy,bias` when the layout has velocity.
pub fn write_trajectory(layout: StateLayout, states: &[KeyframeState]) -> String {
    let full = layout.has_velocity();
    let mut s = String::from(if full { "index,x,y,theta,vx,vy,bias\n" } else { "index,x,y,theta\n" });
    for (i, st) in states.iter().enumerate() {
        let theta = if layout.has_heading() { st.theta } else { 0.0 };
        let mut vals = vec![st.x, st.y, theta];
        if full {
            vals.extend([st.vx, st.vy, st.bias]);
        }
        let cells: Vec<String> = vals.iter().map(|v| format_g(*v, 17)).collect();
        let _ = writeln!(s, "{},{}", i + 1, cells.join(","));
    }
    s
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| perr(1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').map(|c| c.trim()).collect();
    let full = match cols.as_slice() {
        ["index", "x", "y", "theta"] => false,
        ["index", "x", "y", "theta", "vx", "vy", "bias"] => true,
        _ => return Err(perr(1, format!("unexpected header {header:?}"))),
    };
    let mut indices = Vec::new();
    let mut states = Vec::new();
    for (i, l) in lines {
        let line = i + 1;
        let cells: Vec<&str> = l.split(',').map(|c| c.trim()).collect();
        if cells.len() != cols.len() {
            return Err(perr(line, format!("{} fields, header has {}", cells.len(), cols.len())));
        }
        let idx: usize = cells[0].parse().map_err(|_| perr(line, format!("bad index {:?}", cells[0])))?;
        let v = nums(line, &cells[1..])?;
        let mut s = KeyframeState::pose(v[0], v[1], v[2]);
        if full {
            s.vx = v[3];
            s.vy = v[4];
            s.bias = v[5];
        }
        if indices.last().is_some_and(|&p| idx <= p) {
            return Err(perr(line, "indices must increase"));
        }
        indices.push(idx);
        states.push(s);
    }
    Ok(Trajectory {
        layout: if full { StateLayout::FULL } else { StateLayout::POSE },
        indices,
        states,
    })
}
