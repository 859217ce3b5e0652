use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Family, Task, TaskParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    Right,
    Up,
    Left,
    Bottom,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::Left, Quadrant::Right, Quadrant::Up, Quadrant::Bottom];

    pub fn center(self) -> f64 {
        match self {
            Quadrant::Right => 0.0,
            Quadrant::Up => FRAC_PI_2,
            Quadrant::Left => PI,
            Quadrant::Bottom => 3.0 * FRAC_PI_2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::Right => "right",
            Quadrant::Up => "up",
            Quadrant::Left => "left",
            Quadrant::Bottom => "bottom",
        }
    }

    pub fn opposite(self) -> Quadrant {
        match self {
            Quadrant::Right => Quadrant::Left,
            Quadrant::Left => Quadrant::Right,
            Quadrant::Up => Quadrant::Bottom,
            Quadrant::Bottom => Quadrant::Up,
        }
    }
}

/// Sampleable region of task parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Goal angles on the half-open arc `[center - width/2, center + width/2)`.
    Arc { center: f64, width: f64 },
    /// Target velocities on the half-open interval `[lo, hi)` (`lo` when degenerate).
    Interval { lo: f64, hi: f64 },
    /// Both running directions with equal probability.
    BothDirections,
    Direction { sign: f64 },
}

impl Region {
    pub fn quadrant(q: Quadrant) -> Self {
        Region::Arc { center: q.center(), width: FRAC_PI_2 }
    }
}

/// Angle difference wrapped to `[-pi, pi)`.
fn wrap(d: f64) -> f64 {
    (d + PI).rem_euclid(TAU) - PI
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpace {
    pub family: Family,
    pub region: Region,
}

impl TaskSpace {
    pub fn new(family: Family, region: Region) -> Result<Self> {
        let ok = match region {
            Region::Arc { width, center } => {
                family.is_nav() && (0.0..=TAU).contains(&width) && center.is_finite()
            }
            Region::Interval { lo, hi } => family.is_velocity() && lo.is_finite() && hi >= lo,
            Region::BothDirections => family.is_direction(),
            Region::Direction { sign } => family.is_direction() && (sign == 1.0 || sign == -1.0),
        };
        if ok {
            Ok(Self { family, region })
        } else {
            Err(Error::UnknownKey(format!("{family}:{region:?}")))
        }
    }

    pub fn quadrant(family: Family, q: Quadrant) -> Result<Self> {
        Self::new(family, Region::quadrant(q))
    }

    /// The four navigation goal spaces, in `left, right, up, bottom` order.
    pub fn nav_quadrants(family: Family) -> Result<Vec<Self>> {
        Quadrant::ALL.iter().map(|&q| Self::quadrant(family, q)).collect()
    }

    /// The six unit velocity intervals `[-3,-2] .. [2,3]`.
    pub fn velocity_intervals(family: Family) -> Result<Vec<Self>> {
        (-3..3)
            .map(|lo| Self::new(family, Region::Interval { lo: lo as f64, hi: lo as f64 + 1.0 }))
            .collect()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Task {
        let params = match self.region {
            Region::Arc { center, width } => {
                let u: f64 = rng.random();
                TaskParams::Goal { angle: center - width / 2.0 + u * width }
            }
            Region::Interval { lo, hi } => {
                let u: f64 = rng.random();
                let v = lo + u * (hi - lo);
                // guard against rounding onto the excluded endpoint
                TaskParams::Velocity { target: if v >= hi && hi > lo { lo } else { v } }
            }
            Region::BothDirections => {
                TaskParams::Direction { sign: if rng.random::<bool>() { 1.0 } else { -1.0 } }
            }
            Region::Direction { sign } => TaskParams::Direction { sign },
        };
        Task { spec: self.family.spec(), params }
    }

    pub fn contains(&self, task: &Task) -> bool {
        if task.family() != self.family {
            return false;
        }
        match (self.region, task.params) {
            (Region::Arc { center, width }, TaskParams::Goal { angle }) => {
                if width >= TAU {
                    return true;
                }
                let d = wrap(angle - center);
                if width == 0.0 {
                    return d.abs() < 1e-12;
                }
                // snap boundary round-off so each edge belongs to one arc
                let half = width / 2.0;
                if (d - half).abs() < 1e-12 {
                    return false;
                }
                if (d + half).abs() < 1e-12 {
                    return true;
                }
                -half <= d && d < half
            }
            (Region::Interval { lo, hi }, TaskParams::Velocity { target }) => {
                if hi == lo {
                    target == lo
                } else {
                    lo <= target && target < hi
                }
            }
            (Region::BothDirections, TaskParams::Direction { .. }) => true,
            (Region::Direction { sign }, TaskParams::Direction { sign: s }) => sign == s,
            _ => false,
        }
    }

    /// Canonical string key, e.g. `nav_dense:left` or `dash_vel:[1,2]`.
    pub fn key(&self) -> String {
        let region = match self.region {
            Region::Arc { center, width } => {
                match Quadrant::ALL
                    .into_iter()
                    .find(|q| Region::quadrant(*q) == self.region)
                {
                    Some(q) => q.name().to_string(),
                    None => format!("arc[{},{}]", center.to_degrees(), width.to_degrees()),
                }
            }
            Region::Interval { lo, hi } => format!("[{lo},{hi}]"),
            Region::BothDirections => "both".into(),
            Region::Direction { sign } if sign > 0.0 => "forward".into(),
            Region::Direction { .. } => "backward".into(),
        };
        format!("{}:{}", self.family, region)
    }

    pub fn parse(key: &str) -> Result<Self> {
        let unknown = || Error::UnknownKey(key.to_string());
        let (fam, region) = match key.split_once(':') {
            Some((f, r)) => (f, Some(r)),
            None => (key, None),
        };
        let family = Family::parse(fam)?;
        let pair = |body: &str| -> Result<(f64, f64)> {
            let inner = body
                .strip_prefix('[')
                .and_then(|b| b.strip_suffix(']'))
                .ok_or_else(unknown)?;
            let (a, b) = inner.split_once(',').ok_or_else(unknown)?;
            let a: f64 = a.trim().parse().map_err(|_| unknown())?;
            let b: f64 = b.trim().parse().map_err(|_| unknown())?;
            Ok((a, b))
        };
        let region = match region {
            None | Some("both") if family.is_direction() => Region::BothDirections,
            Some("forward") if family.is_direction() => Region::Direction { sign: 1.0 },
            Some("backward") if family.is_direction() => Region::Direction { sign: -1.0 },
            Some(name) if family.is_nav() => {
                if let Some(q) = Quadrant::ALL.into_iter().find(|q| q.name() == name) {
                    Region::quadrant(q)
                } else if let Some(body) = name.strip_prefix("arc") {
                    let (c, w) = pair(body)?;
                    Region::Arc { center: c.to_radians(), width: w.to_radians() }
                } else {
                    return Err(unknown());
                }
            }
            Some(body) if family.is_velocity() => {
                let (lo, hi) = pair(body)?;
                Region::Interval { lo, hi }
            }
            _ => return Err(unknown()),
        };
        Self::new(family, region).map_err(|_| unknown())
    }

    /// Whether the supports of two spaces are disjoint.
    pub fn disjoint(&self, other: &TaskSpace) -> bool {
        if self.family != other.family {
            return true;
        }
        match (self.region, other.region) {
            (Region::Arc { center: c1, width: w1 }, Region::Arc { center: c2, width: w2 }) => {
                wrap(c2 - c1).abs() >= (w1 + w2) / 2.0 - 1e-12
            }
            (Region::Interval { lo: a, hi: b }, Region::Interval { lo: c, hi: d }) => b <= c || d <= a,
            (Region::Direction { sign: a }, Region::Direction { sign: b }) => a != b,
            _ => false,
        }
    }
}

impl fmt::Display for TaskSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

impl FromStr for TaskSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::seed_tree;

    #[test]
    fn key_round_trip() {
        for key in [
            "nav_dense:left",
            "nav_sparse:bottom",
            "dash_vel:[1,2]",
            "dash_vel_b:[-3,-2]",
            "dash_dir:both",
            "dash_dir_b:forward",
        ] {
            assert_eq!(TaskSpace::parse(key).unwrap().key(), key);
        }
        assert_eq!(TaskSpace::parse("dash_dir").unwrap().key(), "dash_dir:both");
        assert!(TaskSpace::parse("nav_dense:[1,2]").is_err());
        assert!(TaskSpace::parse("dash_vel:left").is_err());
        assert!(TaskSpace::parse("cheetah:left").is_err());
    }

    #[test]
    fn degenerate_arc_gives_goal_on_axis() {
        let space = TaskSpace::new(Family::NavDense, Region::Arc { center: 0.0, width: 0.0 }).unwrap();
        let task = space.sample(&mut seed_tree(0, ["t"]));
        assert_eq!(task.goal().unwrap(), [1.0, 0.0]);
        assert!(space.contains(&task));
    }

    #[test]
    fn velocity_sampling_is_uniform() {
        let space = TaskSpace::parse("dash_vel:[1,2]").unwrap();
        let mut rng = seed_tree(11, ["vel"]);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let t = space.sample(&mut rng);
            assert!(space.contains(&t));
            if let TaskParams::Velocity { target } = t.params {
                sum += target;
            }
        }
        let mean = sum / n as f64;
        assert!((1.45..=1.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn direction_sampling_is_balanced() {
        let space = TaskSpace::parse("dash_dir").unwrap();
        let mut rng = seed_tree(12, ["dir"]);
        let n = 10_000;
        let fwd = (0..n)
            .filter(|_| matches!(space.sample(&mut rng).params, TaskParams::Direction { sign } if sign > 0.0))
            .count();
        let frac = fwd as f64 / n as f64;
        assert!((0.47..=0.53).contains(&frac), "frac {frac}");
    }

    #[test]
    fn quadrants_partition_the_circle() {
        let spaces = TaskSpace::nav_quadrants(Family::NavDense).unwrap();
        let mut rng = seed_tree(3, ["q"]);
        for s in &spaces {
            for _ in 0..2000 {
                let task = s.sample(&mut rng);
                let hits = spaces.iter().filter(|o| o.contains(&task)).count();
                assert_eq!(hits, 1, "{} sampled {:?}", s, task.params);
            }
        }
        // boundary angles belong to exactly one quadrant
        for k in 0..8 {
            let angle = k as f64 * std::f64::consts::FRAC_PI_4;
            let task = Task::nav_goal(Family::NavDense, angle).unwrap();
            assert_eq!(spaces.iter().filter(|o| o.contains(&task)).count(), 1, "angle {angle}");
        }
        for (i, a) in spaces.iter().enumerate() {
            for (j, b) in spaces.iter().enumerate() {
                assert_eq!(a.disjoint(b), i != j);
            }
        }
    }

    #[test]
    fn velocity_intervals_never_coincide() {
        let spaces = TaskSpace::velocity_intervals(Family::DashVel).unwrap();
        assert_eq!(spaces.len(), 6);
        let mut rng = seed_tree(4, ["v"]);
        for s in &spaces {
            for _ in 0..2000 {
                let task = s.sample(&mut rng);
                assert_eq!(spaces.iter().filter(|o| o.contains(&task)).count(), 1);
            }
        }
    }
}
