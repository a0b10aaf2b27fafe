//! Planar helpers: angles, frames and an arc-length-parameterized polyline.

use std::f64::consts::PI;

pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, c: f64) -> Vec2 {
    [a[0] * c, a[1] * c]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

pub fn dir(heading: f64) -> Vec2 {
    [heading.cos(), heading.sin()]
}

/// Unit vector 90 degrees counter-clockwise of `heading`.
pub fn left(heading: f64) -> Vec2 {
    [-heading.sin(), heading.cos()]
}

/// Wrap to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * PI);
    if x <= -PI {
        x += 2.0 * PI;
    } else if x > PI {
        x -= 2.0 * PI;
    }
    x
}

/// World point expressed in the frame at `origin` facing `heading` (x forward, y left).
pub fn to_local(origin: Vec2, heading: f64, p: Vec2) -> Vec2 {
    let d = sub(p, origin);
    let (s, c) = heading.sin_cos();
    [c * d[0] + s * d[1], -s * d[0] + c * d[1]]
}

pub fn to_world(origin: Vec2, heading: f64, p: Vec2) -> Vec2 {
    let (s, c) = heading.sin_cos();
    [origin[0] + c * p[0] - s * p[1], origin[1] + s * p[0] + c * p[1]]
}

/// Densely sampled path with cumulative arc length.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polyline {
    pub points: Vec<Vec2>,
    pub s: Vec<f64>,
}

/// Closest point on a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub distance: f64,
    /// Positive when the query point is left of the path.
    pub lateral: f64,
}

impl Polyline {
    pub fn push(&mut self, p: Vec2) {
        match self.points.last() {
            None => {
                self.points.push(p);
                self.s.push(0.0);
            }
            Some(&q) => {
                let d = dist(p, q);
                if d > 1e-9 {
                    let s = self.s.last().copied().unwrap_or(0.0) + d;
                    self.points.push(p);
                    self.s.push(s);
                }
            }
        }
    }

    pub fn length(&self) -> f64 {
        self.s.last().copied().unwrap_or(0.0)
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.s.partition_point(|&v| v <= s);
        i.saturating_sub(1).min(self.points.len().saturating_sub(2))
    }

    /// Point at arc length `s`; beyond either end the path is extended straight.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s.max(0.0));
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = self.s[i + 1] - self.s[i];
        let t = (s - self.s[i]) / seg;
        add(a, scale(sub(b, a), t))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s.max(0.0));
        let d = sub(self.points[i + 1], self.points[i]);
        d[1].atan2(d[0])
    }

    /// Closest point with arc length inside `[s_lo, s_hi]`.
    pub fn project_window(&self, p: Vec2, s_lo: f64, s_hi: f64) -> Projection {
        let lo = self.segment_at(s_lo.max(0.0));
        let hi = self.segment_at(s_hi.min(self.length()));
        let mut best = Projection {
            s: 0.0,
            distance: f64::INFINITY,
            lateral: 0.0,
        };
        for i in lo..=hi {
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = sub(b, a);
            let len2 = dot(ab, ab);
            let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
            let q = add(a, scale(ab, t));
            let d = dist(p, q);
            if d < best.distance {
                let cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0]);
                best = Projection {
                    s: self.s[i] + t * (self.s[i + 1] - self.s[i]),
                    distance: d,
                    lateral: if cross >= 0.0 { d } else { -d },
                };
            }
        }
        best
    }

    pub fn project(&self, p: Vec2) -> Projection {
        self.project_window(p, 0.0, self.length())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_round_trip() {
        let o = [3.0, -2.0];
        let h = 0.7;
        let p = [5.5, 1.25];
        let back = to_world(o, h, to_local(o, h, p));
        assert!(dist(back, p) < 1e-12);
        let ahead = to_local(o, h, add(o, dir(h)));
        assert!(dist(ahead, [1.0, 0.0]) < 1e-12);
        let l = to_local(o, h, add(o, left(h)));
        assert!(dist(l, [0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn wrap_range() {
        for k in -20..20 {
            let a = wrap_angle(f64::from(k) * 0.9);
            assert!(a > -PI && a <= PI);
        }
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn polyline_projection() {
        let mut pl = Polyline::default();
        for i in 0..=10 {
            pl.push([f64::from(i), 0.0]);
        }
        pl.push([10.0, 5.0]);
        assert_eq!(pl.length(), 15.0);
        let pr = pl.project([4.3, 1.5]);
        assert!((pr.s - 4.3).abs() < 1e-12 && (pr.lateral - 1.5).abs() < 1e-12);
        let pr = pl.project([4.3, -1.5]);
        assert!((pr.lateral + 1.5).abs() < 1e-12);
        assert!(dist(pl.point_at(12.0), [10.0, 2.0]) < 1e-12);
        // Straight extension past the end.
        assert!(dist(pl.point_at(16.0), [10.0, 6.0]) < 1e-12);
    }
}
