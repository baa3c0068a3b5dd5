//! Closed test track described by a piecewise-linear curvature profile.
//!
//! Arcs are joined to straights by clothoid ramps (linear curvature), so the
//! whole profile is a list of `(sigma, kappa)` breakpoints with linear
//! interpolation in between.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dual::Real;

/// Radii of the eight curves in driving order, left positive.
pub const PAPER_RADII: [f64; 8] = [90.0, -90.0, 100.0, -100.0, 110.0, -110.0, 120.0, -120.0];
/// Width of the single lane.
pub const PAPER_LANE_WIDTH: f64 = 4.5;
/// Length of each clothoid transition ramp.
pub const CLOTHOID_LENGTH: f64 = 30.0;
/// Heading change of a left curve, ramps included.
pub const LEFT_CURVE_TURN: f64 = 3.0 * PI / 4.0;
/// Heading change of a right curve, ramps included.
pub const RIGHT_CURVE_TURN: f64 = PI / 4.0;
/// Target lap length; straights are sized to hit it.
pub const TARGET_LENGTH: f64 = 2500.0;
/// Format tag written into track files.
pub const TRACK_FILE_VERSION: &str = "track-v1";

const CLOSURE_TOL: f64 = 1e-6;
/// Sub-interval length for Gauss-Legendre position quadrature.
const QUAD_STEP: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("track needs at least two breakpoints")]
    TooFewBreakpoints,
    #[error("breakpoints must start at 0 (got {0})")]
    BadStart(f64),
    #[error("breakpoints not strictly increasing at index {0}")]
    NotIncreasing(usize),
    #[error("last breakpoint {last} does not match track length {length}")]
    LengthMismatch { last: f64, length: f64 },
    #[error("curvature does not close: kappa(0)={start}, kappa(L)={end}")]
    KappaNotClosed { start: f64, end: f64 },
    #[error("heading does not close: integral of kappa is {0}, expected 2*pi")]
    HeadingNotClosed(f64),
    #[error("lane width must be positive (got {0})")]
    LaneWidth(f64),
    #[error("non-finite value in track data")]
    NonFinite,
    #[error("track file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing metadata `{0}` in track file")]
    MissingMeta(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that can report road curvature along arc length.
///
/// The method is generic over [`Real`] so that curvature participates in the
/// derivatives of the discrete dynamics.
pub trait CurvatureFn {
    fn kappa<T: Real>(&self, sigma: T) -> T;
}

/// Road with the same curvature everywhere. Handy for straight-road and
/// steady-cornering experiments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantCurvature(pub f64);

impl CurvatureFn for ConstantCurvature {
    fn kappa<T: Real>(&self, _sigma: T) -> T {
        T::cst(self.0)
    }
}

impl<K: CurvatureFn> CurvatureFn for &K {
    fn kappa<T: Real>(&self, sigma: T) -> T {
        (**self).kappa(sigma)
    }
}

/// A curve on the track: the stretch between two straights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveSpan {
    /// First arc-length position with non-zero curvature (start of the entry ramp).
    pub start: f64,
    /// End of the exit ramp.
    pub end: f64,
    /// Signed peak curvature.
    pub peak_kappa: f64,
}

impl CurveSpan {
    pub fn radius(&self) -> f64 {
        1.0 / self.peak_kappa
    }

    pub fn contains(&self, sigma: f64) -> bool {
        sigma >= self.start && sigma <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Pose {
    x: f64,
    y: f64,
    heading: f64,
}

#[derive(Clone, Debug)]
pub struct CurvatureProfile {
    breakpoints: Vec<f64>,
    kappa_values: Vec<f64>,
    total_length: f64,
    lane_width: f64,
    /// Centerline pose at every breakpoint.
    poses: Vec<Pose>,
}

impl CurvatureProfile {
    /// Build and validate a closed profile.
    pub fn new(
        breakpoints: Vec<f64>,
        kappa_values: Vec<f64>,
        total_length: f64,
        lane_width: f64,
    ) -> Result<Self, TrackError> {
        if breakpoints.len() < 2 || breakpoints.len() != kappa_values.len() {
            return Err(TrackError::TooFewBreakpoints);
        }
        if breakpoints
            .iter()
            .chain(&kappa_values)
            .chain([&total_length, &lane_width])
            .any(|v| !v.is_finite())
        {
            return Err(TrackError::NonFinite);
        }
        if breakpoints[0] != 0.0 {
            return Err(TrackError::BadStart(breakpoints[0]));
        }
        if let Some(i) = breakpoints.windows(2).position(|w| w[1] <= w[0]) {
            return Err(TrackError::NotIncreasing(i + 1));
        }
        let last = *breakpoints.last().unwrap();
        if (last - total_length).abs() > 1e-9 {
            return Err(TrackError::LengthMismatch {
                last,
                length: total_length,
            });
        }
        let (k0, kl) = (kappa_values[0], *kappa_values.last().unwrap());
        if (k0 - kl).abs() > 1e-12 {
            return Err(TrackError::KappaNotClosed { start: k0, end: kl });
        }
        if lane_width <= 0.0 {
            return Err(TrackError::LaneWidth(lane_width));
        }

        let mut profile = Self {
            breakpoints,
            kappa_values,
            total_length,
            lane_width,
            poses: Vec::new(),
        };
        let turn = profile.heading_integral();
        if (turn - 2.0 * PI).abs() > CLOSURE_TOL {
            return Err(TrackError::HeadingNotClosed(turn));
        }
        profile.poses = profile.integrate_poses();
        Ok(profile)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn kappa_values(&self) -> &[f64] {
        &self.kappa_values
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn lane_width(&self) -> f64 {
        self.lane_width
    }

    /// Exact integral of the piecewise-linear curvature over one lap.
    pub fn heading_integral(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .zip(self.kappa_values.windows(2))
            .map(|(s, k)| 0.5 * (k[0] + k[1]) * (s[1] - s[0]))
            .sum()
    }

    /// Wrap an arc-length position into `[0, L)`.
    pub fn wrap(&self, sigma: f64) -> f64 {
        let w = sigma.rem_euclid(self.total_length);
        if w >= self.total_length {
            0.0
        } else {
            w
        }
    }

    /// Index `i` of the segment `[s_i, s_{i+1})` containing a wrapped position.
    fn segment(&self, wrapped: f64) -> usize {
        let i = self.breakpoints.partition_point(|&s| s <= wrapped);
        i.saturating_sub(1).min(self.breakpoints.len() - 2)
    }

    /// Curvature at `sigma` (wraps modulo the lap length).
    pub fn curvature(&self, sigma: f64) -> f64 {
        self.kappa(sigma)
    }

    /// Curvature at `sigma + offset` for every offset.
    pub fn curvature_preview(&self, sigma: f64, offsets: &[f64]) -> Vec<f64> {
        offsets.iter().map(|o| self.curvature(sigma + o)).collect()
    }

    /// Largest curvature slope, used to bound continuity checks.
    pub fn max_slope(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .zip(self.kappa_values.windows(2))
            .map(|(s, k)| ((k[1] - k[0]) / (s[1] - s[0])).abs())
            .fold(0.0, f64::max)
    }

    /// Curves are maximal stretches of non-zero curvature.
    pub fn curves(&self) -> Vec<CurveSpan> {
        let mut out = Vec::new();
        let n = self.breakpoints.len();
        let mut i = 0;
        while i + 1 < n {
            if self.kappa_values[i] == 0.0 && self.kappa_values[i + 1] == 0.0 {
                i += 1;
                continue;
            }
            let start = self.breakpoints[i];
            let mut peak: f64 = 0.0;
            let mut j = i + 1;
            while j < n {
                if self.kappa_values[j].abs() > peak.abs() {
                    peak = self.kappa_values[j];
                }
                if self.kappa_values[j] == 0.0 {
                    break;
                }
                j += 1;
            }
            let j = j.min(n - 1);
            out.push(CurveSpan {
                start,
                end: self.breakpoints[j],
                peak_kappa: peak,
            });
            i = j;
        }
        out
    }

    /// Centerline position offset laterally by `d` (left positive).
    /// Returns `(x, y, heading)` where heading is the centerline tangent.
    pub fn frenet_to_cartesian(&self, sigma: f64, d: f64) -> (f64, f64, f64) {
        let laps = (sigma / self.total_length).floor();
        let wrapped = self.wrap(sigma);
        let i = self.segment(wrapped);
        let k0 = self.kappa_values[i];
        let slope = self.slope(i);
        let pose = integrate_segment(self.poses[i], k0, slope, wrapped - self.breakpoints[i]);
        // every full lap adds 2*pi of heading and ends where it started
        let heading = pose.heading + laps * 2.0 * PI;
        (
            pose.x - d * pose.heading.sin(),
            pose.y + d * pose.heading.cos(),
            heading,
        )
    }

    fn slope(&self, i: usize) -> f64 {
        (self.kappa_values[i + 1] - self.kappa_values[i])
            / (self.breakpoints[i + 1] - self.breakpoints[i])
    }

    fn integrate_poses(&self) -> Vec<Pose> {
        let mut poses = Vec::with_capacity(self.breakpoints.len());
        let mut pose = Pose {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
        };
        poses.push(pose);
        for i in 0..self.breakpoints.len() - 1 {
            let len = self.breakpoints[i + 1] - self.breakpoints[i];
            pose = integrate_segment(pose, self.kappa_values[i], self.slope(i), len);
            poses.push(pose);
        }
        poses
    }

    /// Serialize to the plain-text track format.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#format={TRACK_FILE_VERSION}");
        let _ = writeln!(s, "#lane_width={}", self.lane_width);
        let _ = writeln!(s, "#length={}", self.total_length);
        s.push_str("sigma,kappa\n");
        for (sig, k) in self.breakpoints.iter().zip(&self.kappa_values) {
            let _ = writeln!(s, "{sig},{k}");
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TrackError> {
        let mut lane_width = None;
        let mut length = None;
        let mut header_seen = false;
        let mut sig = Vec::new();
        let mut kap = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let (key, value) = meta.split_once('=').ok_or_else(|| TrackError::Parse {
                    line: lineno,
                    msg: "metadata must be key=value".into(),
                })?;
                let parse = |v: &str| {
                    v.trim().parse::<f64>().map_err(|e| TrackError::Parse {
                        line: lineno,
                        msg: e.to_string(),
                    })
                };
                match key.trim() {
                    "lane_width" => lane_width = Some(parse(value)?),
                    "length" => length = Some(parse(value)?),
                    _ => {}
                }
                continue;
            }
            if !header_seen {
                if line != "sigma,kappa" {
                    return Err(TrackError::Parse {
                        line: lineno,
                        msg: format!("expected header `sigma,kappa`, got `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            let (a, b) = line.split_once(',').ok_or_else(|| TrackError::Parse {
                line: lineno,
                msg: "expected two columns".into(),
            })?;
            let parse = |v: &str| {
                v.trim().parse::<f64>().map_err(|e| TrackError::Parse {
                    line: lineno,
                    msg: e.to_string(),
                })
            };
            sig.push(parse(a)?);
            kap.push(parse(b)?);
        }
        let lane_width = lane_width.ok_or(TrackError::MissingMeta("lane_width"))?;
        let length = length.ok_or(TrackError::MissingMeta("length"))?;
        Self::new(sig, kap, length, lane_width)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrackError> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrackError> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    /// SHA-256 of the canonical file representation.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv_string().as_bytes()))
    }
}

impl CurvatureFn for CurvatureProfile {
    fn kappa<T: Real>(&self, sigma: T) -> T {
        let v = sigma.value();
        let wrapped = self.wrap(v);
        let i = self.segment(wrapped);
        // shift keeps the tangent of sigma intact
        let local = sigma - (v - wrapped) - self.breakpoints[i];
        local * self.slope(i) + self.kappa_values[i]
    }
}

impl PartialEq for CurvatureProfile {
    fn eq(&self, other: &Self) -> bool {
        self.breakpoints == other.breakpoints
            && self.kappa_values == other.kappa_values
            && self.total_length == other.total_length
            && self.lane_width == other.lane_width
    }
}

/// 5-point Gauss-Legendre nodes and weights on `[-1, 1]`.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Advance a centerline pose along a clothoid piece with initial curvature
/// `k0` and curvature slope `c` for arc length `len`.
fn integrate_segment(start: Pose, k0: f64, c: f64, len: f64) -> Pose {
    let heading = |t: f64| start.heading + k0 * t + 0.5 * c * t * t;
    if len <= 0.0 {
        return start;
    }
    let pieces = (len / QUAD_STEP).ceil().max(1.0) as usize;
    let h = len / pieces as f64;
    let (mut x, mut y) = (start.x, start.y);
    for p in 0..pieces {
        let mid = (p as f64 + 0.5) * h;
        for (node, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let t = mid + 0.5 * h * node;
            let th = heading(t);
            x += 0.5 * h * w * th.cos();
            y += 0.5 * h * w * th.sin();
        }
    }
    Pose {
        x,
        y,
        heading: heading(len),
    }
}

/// Stadium-shaped loop: two straights of length `straight` joined by two
/// left half-turns of the given radius, each with clothoid ramps.
pub fn build_loop_track(radius: f64, straight: f64, lane_width: f64) -> Result<CurvatureProfile, TrackError> {
    let k = 1.0 / radius;
    let arc = PI * radius - CLOTHOID_LENGTH;
    let mut breaks = vec![0.0];
    let mut kappas = vec![0.0];
    let mut at = 0.0;
    for _ in 0..2 {
        for (len, kv) in [(straight, 0.0), (CLOTHOID_LENGTH, k), (arc, k), (CLOTHOID_LENGTH, 0.0)] {
            at += len;
            breaks.push(at);
            kappas.push(kv);
        }
    }
    CurvatureProfile::new(breaks, kappas, at, lane_width)
}

/// Closed track with the eight listed radii.
///
/// Layout: straight, then curve `i` (entry ramp, arc, exit ramp), repeated.
/// Left curves turn 135°, right curves 45°, so the lap turns exactly 2π.
/// All straights share a base length; straights 1 and 2 get extra length
/// chosen so the lap also closes in position, and the base length sets the
/// total to [`TARGET_LENGTH`].
pub fn build_paper_track() -> CurvatureProfile {
    let curves: Vec<(f64, f64)> = PAPER_RADII
        .iter()
        .map(|&r| {
            let turn = if r > 0.0 {
                LEFT_CURVE_TURN
            } else {
                RIGHT_CURVE_TURN
            };
            // turn = kappa * (ramp/2 + arc + ramp/2)
            (1.0 / r, turn * r.abs() - CLOTHOID_LENGTH)
        })
        .collect();

    // displacement of the curves alone, and the heading of each straight
    let mut pose = Pose {
        x: 0.0,
        y: 0.0,
        heading: 0.0,
    };
    let mut straight_headings = Vec::with_capacity(curves.len());
    let mut curve_length = 0.0;
    for &(k, arc) in &curves {
        straight_headings.push(pose.heading);
        pose = integrate_segment(pose, 0.0, k / CLOTHOID_LENGTH, CLOTHOID_LENGTH);
        pose = integrate_segment(pose, k, 0.0, arc);
        pose = integrate_segment(pose, k, -k / CLOTHOID_LENGTH, CLOTHOID_LENGTH);
        curve_length += 2.0 * CLOTHOID_LENGTH + arc;
    }

    // unknowns: base length b, extras e1 (straight 1) and e2 (straight 2)
    let (sum_cos, sum_sin) = straight_headings
        .iter()
        .fold((0.0, 0.0), |(c, s), h| (c + h.cos(), s + h.sin()));
    let (h1, h2) = (straight_headings[1], straight_headings[2]);
    let a = Matrix3::new(
        sum_cos,
        h1.cos(),
        h2.cos(),
        sum_sin,
        h1.sin(),
        h2.sin(),
        curves.len() as f64,
        1.0,
        1.0,
    );
    let rhs = Vector3::new(-pose.x, -pose.y, TARGET_LENGTH - curve_length);
    let sol = a
        .lu()
        .solve(&rhs)
        .expect("straight-length system is nonsingular for this layout");
    let mut straights = vec![sol[0]; curves.len()];
    straights[1] += sol[1];
    straights[2] += sol[2];

    let mut breakpoints = vec![0.0];
    let mut kappa = vec![0.0];
    let mut s = 0.0;
    for (i, &(k, arc)) in curves.iter().enumerate() {
        for (len, kend) in [
            (straights[i], 0.0),
            (CLOTHOID_LENGTH, k),
            (arc, k),
            (CLOTHOID_LENGTH, 0.0),
        ] {
            s += len;
            breakpoints.push(s);
            kappa.push(kend);
        }
    }
    let total = s;
    CurvatureProfile::new(breakpoints, kappa, total, PAPER_LANE_WIDTH)
        .expect("paper track satisfies profile invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track() -> CurvatureProfile {
        build_paper_track()
    }

    #[test]
    fn arc_curvature_matches_radius() {
        let t = track();
        let c = t.curves();
        assert_eq!(c.len(), 8);
        for (span, r) in c.iter().zip(PAPER_RADII) {
            assert!((span.radius() - r).abs() < 1e-9);
            // middle of the curve lies inside the constant arc
            let mid = 0.5 * (span.start + span.end);
            assert!((t.curvature(mid) - 1.0 / r).abs() < 1e-15);
        }
        assert!((t.curvature(c[0].start + 40.0) - 1.0 / 90.0).abs() < 1e-15);
    }

    #[test]
    fn straight_has_zero_curvature() {
        let t = track();
        assert_eq!(t.curvature(10.0), 0.0);
        assert_eq!(t.lane_width(), 4.5);
    }

    #[test]
    fn heading_closes_to_two_pi() {
        let t = track();
        // independent midpoint quadrature on a fine grid
        let n = 250_000;
        let h = t.total_length() / n as f64;
        let q: f64 = (0..n).map(|i| t.curvature((i as f64 + 0.5) * h) * h).sum();
        assert!((q - 2.0 * PI).abs() < 1e-6, "{q}");
        assert!((t.heading_integral() - 2.0 * PI).abs() < 1e-9);
    }

    #[test]
    fn lap_length_is_near_target() {
        let t = track();
        assert!((t.total_length() - TARGET_LENGTH).abs() < 1e-6);
        assert!(t.breakpoints().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn breakpoint_lookup_is_exact() {
        let t = track();
        for (s, k) in t.breakpoints().iter().zip(t.kappa_values()) {
            if *s < t.total_length() {
                assert_eq!(t.curvature(*s), *k);
            }
        }
    }

    #[test]
    fn ramp_midpoint_is_half_the_arc_curvature() {
        let t = track();
        let c = t.curves()[0];
        let k = t.curvature(c.start + 0.5 * CLOTHOID_LENGTH);
        assert!((k - 1.0 / 180.0).abs() < 1e-15);
    }

    #[test]
    fn curvature_wraps() {
        let t = track();
        let l = t.total_length();
        for s in [10.0, 300.0, 777.7] {
            assert!((t.curvature(l + s) - t.curvature(s)).abs() < 1e-12);
            assert!((t.curvature(s - l) - t.curvature(s)).abs() < 1e-12);
        }
    }

    #[test]
    fn preview_on_straight_and_across_transition() {
        let t = track();
        let offs: Vec<f64> = (0..7).map(|i| 5.0 * i as f64).collect();
        assert!(t.curvature_preview(10.0, &offs).iter().all(|&k| k == 0.0));
        assert_eq!(t.curvature_preview(500.0, &[0.0]), vec![t.curvature(500.0)]);

        let start = t.curves()[0].start;
        let p = t.curvature_preview(start - 10.0, &offs);
        let direct: Vec<f64> = offs.iter().map(|o| t.curvature(start - 10.0 + o)).collect();
        assert_eq!(p, direct);
        assert!(p.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(p[0], 0.0);
        assert!(p[6] > 0.0);
    }

    #[test]
    fn frenet_origin_and_lateral_offset() {
        let t = track();
        let (x, y, h) = t.frenet_to_cartesian(0.0, 0.0);
        assert_eq!((x, y, h), (0.0, 0.0, 0.0));
        let (x, y, _) = t.frenet_to_cartesian(20.0, 1.0);
        assert!((x - 20.0).abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lap_closes_in_position() {
        let t = track();
        let (x, y, h) = t.frenet_to_cartesian(t.total_length(), 0.0);
        assert!(x.hypot(y) < 0.1, "{x} {y}");
        assert!((h - 2.0 * PI).abs() < 1e-6);
    }

    #[test]
    fn csv_round_trip_preserves_profile() {
        let t = track();
        let back = CurvatureProfile::from_csv_str(&t.to_csv_string()).unwrap();
        assert_eq!(t, back);
        assert_eq!(t.hash(), back.hash());
    }

    #[test]
    fn loader_rejects_bad_profiles() {
        let open = "#lane_width=4.5\n#length=100\nsigma,kappa\n0,0\n100,0\n";
        assert!(matches!(
            CurvatureProfile::from_csv_str(open),
            Err(TrackError::HeadingNotClosed(_))
        ));
        let unordered = "#lane_width=4.5\n#length=100\nsigma,kappa\n0,0\n50,0\n40,0\n100,0\n";
        assert!(matches!(
            CurvatureProfile::from_csv_str(unordered),
            Err(TrackError::NotIncreasing(2))
        ));
        let no_meta = "sigma,kappa\n0,0\n100,0\n";
        assert!(matches!(
            CurvatureProfile::from_csv_str(no_meta),
            Err(TrackError::MissingMeta(_))
        ));
        let r = 100.0 / (2.0 * PI);
        let circle = format!("#lane_width=0\n#length=100\nsigma,kappa\n0,{}\n100,{}\n", 1.0 / r, 1.0 / r);
        assert!(matches!(
            CurvatureProfile::from_csv_str(&circle),
            Err(TrackError::LaneWidth(_))
        ));
    }

    #[test]
    fn dual_curvature_carries_slope() {
        use crate::dual::Dual;
        let t = track();
        let c = t.curves()[0];
        let s = c.start + 10.0;
        let k = t.kappa(Dual::var(s));
        assert!((k.re - t.curvature(s)).abs() < 1e-15);
        assert!((k.eps - 1.0 / 90.0 / CLOTHOID_LENGTH).abs() < 1e-15);
    }
}
