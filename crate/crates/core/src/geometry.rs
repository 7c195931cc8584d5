//! Geometric predicates behind the rewards and metrics: oriented-box overlap,
//! boundary gaps, two-body collision impulse and the occlusion sector test.

use serde::{Deserialize, Serialize};

use crate::scenario::{Scene, Vehicle, VehicleDims, VehicleState};
use crate::{Error, Result};

type Vec2 = (f64, f64);

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 - b.0, a.1 - b.1)
}

#[inline]
fn dot(a: Vec2, b: Vec2) -> f64 {
    a.0 * b.0 + a.1 * b.1
}

#[inline]
fn cross(a: Vec2, b: Vec2) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

#[inline]
fn norm(a: Vec2) -> f64 {
    a.0.hypot(a.1)
}

/// Oriented rectangle: center, heading (degrees) of the long axis, half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbPose {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl ObbPose {
    pub fn new(cx: f64, cy: f64, heading: f64, half_length: f64, half_width: f64) -> Self {
        Self { cx, cy, heading, half_length, half_width }
    }

    pub fn from_state(state: &VehicleState, dims: &VehicleDims) -> Self {
        Self::new(state.x, state.y, state.theta, dims.length / 2.0, dims.width / 2.0)
    }

    pub fn of(vehicle: &Vehicle) -> Self {
        Self::from_state(&vehicle.state, &vehicle.dims)
    }

    pub fn center(&self) -> Vec2 {
        (self.cx, self.cy)
    }

    /// Unit vectors along the length and width directions.
    pub fn axes(&self) -> (Vec2, Vec2) {
        let (s, c) = self.heading.to_radians().sin_cos();
        ((c, s), (-s, c))
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, w) = self.axes();
        let (l, h) = (self.half_length, self.half_width);
        let at = |a: f64, b: f64| (self.cx + a * u.0 + b * w.0, self.cy + a * u.1 + b * w.1);
        [at(l, h), at(-l, h), at(-l, -h), at(l, -h)]
    }

    fn edges(&self) -> [(Vec2, Vec2); 4] {
        let c = self.corners();
        [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        let c = self.corners();
        c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
            let d = dot(p, axis);
            (lo.min(d), hi.max(d))
        })
    }

    fn contains(&self, p: Vec2) -> bool {
        let (u, w) = self.axes();
        let d = sub(p, self.center());
        dot(d, u).abs() <= self.half_length && dot(d, w).abs() <= self.half_width
    }
}

/// Separating-axis test over the four face normals. Touching counts as overlap.
pub fn obb_overlap(a: &ObbPose, b: &ObbPose) -> bool {
    let (au, aw) = a.axes();
    let (bu, bw) = b.axes();
    [au, aw, bu, bw].iter().all(|&axis| {
        let (amin, amax) = a.project(axis);
        let (bmin, bmax) = b.project(axis);
        amax >= bmin && bmax >= amin
    })
}

fn segments_intersect(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> bool {
    let r = sub(p2, p1);
    let s = sub(q2, q1);
    let d1 = cross(r, sub(q1, p1));
    let d2 = cross(r, sub(q2, p1));
    let d3 = cross(s, sub(p1, q1));
    let d4 = cross(s, sub(p2, q1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |a: Vec2, b: Vec2, p: Vec2, o: f64| {
        o == 0.0 && p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
    };
    on(p1, p2, q1, d1) || on(p1, p2, q2, d2) || on(q1, q2, p1, d3) || on(q1, q2, p2, d4)
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm(sub(p, (a.0 + t * ab.0, a.1 + t * ab.1)))
}

fn segment_distance(p1: Vec2, p2: Vec2, q1: Vec2, q2: Vec2) -> f64 {
    if segments_intersect(p1, p2, q1, q2) {
        return 0.0;
    }
    point_segment_distance(p1, q1, q2)
        .min(point_segment_distance(p2, q1, q2))
        .min(point_segment_distance(q1, p1, p2))
        .min(point_segment_distance(q2, p1, p2))
}

/// Minimum distance between the two rectangles; exactly 0 when they overlap.
pub fn boundary_gap(a: &ObbPose, b: &ObbPose) -> f64 {
    if obb_overlap(a, b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (p1, p2) in a.edges() {
        for (q1, q2) in b.edges() {
            best = best.min(segment_distance(p1, p2, q1, q2));
        }
    }
    best
}

/// Coefficient of restitution for the two-body impulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpulseParams {
    pub restitution: f64,
}

impl Default for ImpulseParams {
    fn default() -> Self {
        Self { restitution: 0.2 }
    }
}

impl ImpulseParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::Config("impulse.restitution must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Normal impulse `(1+e) * m_red * max(0, (v1 - v2) . n)` with `n` the unit
/// vector from body 1's center to body 2's center.
pub fn impulse_from_velocities(
    p1: Vec2,
    v1: Vec2,
    m1: f64,
    p2: Vec2,
    v2: Vec2,
    m2: f64,
    params: &ImpulseParams,
) -> Result<f64> {
    let d = sub(p2, p1);
    let len = norm(d);
    if len == 0.0 {
        return Err(Error::DegenerateNormal);
    }
    let n = (d.0 / len, d.1 / len);
    let closing = dot(sub(v1, v2), n);
    let m_red = m1 * m2 / (m1 + m2);
    Ok((1.0 + params.restitution) * m_red * closing.max(0.0))
}

/// Collision impulse (kg m/s) between the AV and a BV.
pub fn collision_impulse(
    av: (&VehicleState, &VehicleDims),
    bv: (&VehicleState, &VehicleDims),
    params: &ImpulseParams,
) -> Result<f64> {
    impulse_from_velocities(
        (av.0.x, av.0.y),
        av.0.velocity(),
        av.1.mass,
        (bv.0.x, bv.0.y),
        bv.0.velocity(),
        bv.1.mass,
        params,
    )
}

/// Forward view sector of the AV used for the obstacle-frame count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionParams {
    /// Sector radius (m).
    pub range: f64,
    /// Sector half-angle (degrees).
    pub half_angle: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self { range: 30.0, half_angle: 15.0 }
    }
}

impl OcclusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.range > 0.0) || !(self.half_angle > 0.0 && self.half_angle < 90.0) {
            return Err(Error::Config("occlusion needs range > 0 and 0 < half_angle < 90".into()));
        }
        Ok(())
    }
}

struct Sector {
    apex: Vec2,
    dir: Vec2,
    cos_half: f64,
    range: f64,
    left: Vec2,
    right: Vec2,
}

impl Sector {
    fn new(apex: Vec2, heading: f64, params: &OcclusionParams) -> Self {
        let ray = |deg: f64| {
            let (s, c) = deg.to_radians().sin_cos();
            (apex.0 + params.range * c, apex.1 + params.range * s)
        };
        let (s, c) = heading.to_radians().sin_cos();
        Self {
            apex,
            dir: (c, s),
            cos_half: params.half_angle.to_radians().cos(),
            range: params.range,
            left: ray(heading + params.half_angle),
            right: ray(heading - params.half_angle),
        }
    }

    fn contains(&self, p: Vec2) -> bool {
        let d = sub(p, self.apex);
        let r = norm(d);
        r <= self.range && dot(d, self.dir) >= r * self.cos_half
    }

    /// Whether segment `a..b` crosses the sector's circular arc.
    fn arc_crosses(&self, a: Vec2, b: Vec2) -> bool {
        let d = sub(b, a);
        let f = sub(a, self.apex);
        let qa = dot(d, d);
        let qb = 2.0 * dot(f, d);
        let qc = dot(f, f) - self.range * self.range;
        let disc = qb * qb - 4.0 * qa * qc;
        if qa == 0.0 || disc < 0.0 {
            return false;
        }
        let sq = disc.sqrt();
        [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)].iter().any(|&t| {
            (0.0..=1.0).contains(&t) && {
                let p = (f.0 + t * d.0, f.1 + t * d.1);
                dot(p, self.dir) >= self.range * self.cos_half
            }
        })
    }
}

/// True iff the BV rectangle intersects the AV's forward view sector.
pub fn occludes(av: &VehicleState, bv: (&VehicleState, &VehicleDims), params: &OcclusionParams) -> bool {
    let rect = ObbPose::from_state(bv.0, bv.1);
    let sector = Sector::new((av.x, av.y), av.theta, params);
    if rect.corners().iter().any(|&c| sector.contains(c)) {
        return true;
    }
    if rect.contains(sector.apex) {
        return true;
    }
    rect.edges().iter().any(|&(p, q)| {
        segments_intersect(p, q, sector.apex, sector.left)
            || segments_intersect(p, q, sector.apex, sector.right)
            || sector.arc_crosses(p, q)
    })
}

/// One detected contact between two vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub a: u32,
    pub b: u32,
    /// Impulse magnitude; zero for BV-BV contacts, which never count toward J_max.
    pub j: f64,
}

/// Per-frame geometry consumed by the rewards and metrics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameEvents {
    pub collisions: Vec<CollisionEvent>,
    pub occluding_bv_ids: Vec<u32>,
    /// Minimum AV-BV boundary gap (m).
    pub d_min_current: f64,
}

impl FrameEvents {
    pub fn av_collisions(&self, av_id: u32) -> impl Iterator<Item = &CollisionEvent> {
        self.collisions.iter().filter(move |c| c.a == av_id || c.b == av_id)
    }
}

/// Collisions, minimum AV gap and occluding BVs for one scene.
///
/// AV-BV contacts carry the two-body impulse. When the centers coincide the
/// normal is undefined and the full relative speed is used as closing speed.
pub fn scene_geometry_summary(scene: &Scene, occlusion: &OcclusionParams, impulse: &ImpulseParams) -> FrameEvents {
    let poses: Vec<ObbPose> = scene.vehicles.iter().map(ObbPose::of).collect();
    let av = scene.av();
    let mut events = FrameEvents { d_min_current: f64::INFINITY, ..FrameEvents::default() };

    for i in 0..poses.len() {
        for j in (i + 1)..poses.len() {
            if !obb_overlap(&poses[i], &poses[j]) {
                continue;
            }
            let (a, b) = (&scene.vehicles[i], &scene.vehicles[j]);
            let j_imp = if i == 0 {
                collision_impulse((&a.state, &a.dims), (&b.state, &b.dims), impulse)
                    .unwrap_or_else(|_| coincident_impulse(a, b, impulse))
            } else {
                0.0
            };
            events.collisions.push(CollisionEvent { a: a.id, b: b.id, j: j_imp });
        }
    }
    for (k, bv) in scene.vehicles.iter().enumerate().skip(1) {
        events.d_min_current = events.d_min_current.min(boundary_gap(&poses[0], &poses[k]));
        if occludes(&av.state, (&bv.state, &bv.dims), occlusion) {
            events.occluding_bv_ids.push(bv.id);
        }
    }
    events
}

fn coincident_impulse(a: &Vehicle, b: &Vehicle, params: &ImpulseParams) -> f64 {
    let rel = sub(a.state.velocity(), b.state.velocity());
    let m_red = a.dims.mass * b.dims.mass / (a.dims.mass + b.dims.mass);
    (1.0 + params.restitution) * m_red * norm(rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{RoadGeometry, Vehicle};
    use rand::Rng;

    fn pose(cx: f64, cy: f64, heading: f64) -> ObbPose {
        ObbPose::new(cx, cy, heading, 2.25, 1.0)
    }

    #[test]
    fn identical_poses_overlap() {
        let a = pose(1.0, 2.0, 30.0);
        assert!(obb_overlap(&a, &a));
        assert_eq!(boundary_gap(&a, &a), 0.0);
    }

    #[test]
    fn distant_poses_do_not_overlap() {
        assert!(!obb_overlap(&pose(0.0, 0.0, 0.0), &pose(100.0, 0.0, 0.0)));
    }

    #[test]
    fn rotated_neighbor_matches_point_sampling() {
        let a = pose(0.0, 0.0, 0.0);
        let b = pose(4.0, 0.0, 45.0);
        // b's corner reaches 4 - (2.25 cos45 + 1 sin45) = 1.70 < 2.25, so they touch.
        let mut rng = crate::rng_from_seed(1);
        let mut hit = false;
        for _ in 0..1_000_000 {
            let (u, w) = b.axes();
            let s: f64 = rng.random_range(-b.half_length..=b.half_length);
            let t: f64 = rng.random_range(-b.half_width..=b.half_width);
            let p = (b.cx + s * u.0 + t * w.0, b.cy + s * u.1 + t * w.1);
            if p.0.abs() <= a.half_length && p.1.abs() <= a.half_width {
                hit = true;
                break;
            }
        }
        assert_eq!(obb_overlap(&a, &b), hit);
        assert!(hit);
    }

    #[test]
    fn parallel_edges_three_meters_apart() {
        let a = pose(0.0, 0.0, 0.0);
        let b = pose(4.5 + 3.0, 0.0, 0.0);
        assert!((boundary_gap(&a, &b) - 3.0).abs() < 1e-12);
        let c = pose(0.0, 2.0 + 3.0, 0.0);
        assert!((boundary_gap(&a, &c) - 3.0).abs() < 1e-12);
    }

    fn state(x: f64, y: f64, v: f64, theta: f64) -> VehicleState {
        VehicleState::new(x, y, v, theta)
    }

    #[test]
    fn head_on_impulse() {
        let dims = VehicleDims::default();
        let av = state(0.0, 0.0, 5.0, -90.0);
        let bv = state(0.0, -3.0, 5.0, 90.0);
        let j = collision_impulse((&av, &dims), (&bv, &dims), &ImpulseParams::default()).unwrap();
        assert!((j - 9000.0).abs() < 1e-9);
    }

    #[test]
    fn inelastic_unit_closing_speed() {
        let dims = VehicleDims::default();
        let av = state(0.0, 0.0, 1.0, 0.0);
        let bv = state(3.0, 0.0, 0.0, 0.0);
        let j = collision_impulse((&av, &dims), (&bv, &dims), &ImpulseParams { restitution: 0.0 }).unwrap();
        assert!((j - 750.0).abs() < 1e-9);
    }

    #[test]
    fn separating_bodies_have_zero_impulse() {
        let dims = VehicleDims::default();
        let av = state(0.0, 0.0, 3.0, 180.0);
        let bv = state(3.0, 0.0, 3.0, 0.0);
        assert_eq!(collision_impulse((&av, &dims), (&bv, &dims), &ImpulseParams::default()).unwrap(), 0.0);
    }

    #[test]
    fn coincident_centers_are_degenerate() {
        let dims = VehicleDims::default();
        let s = state(1.0, 1.0, 3.0, 0.0);
        assert!(matches!(
            collision_impulse((&s, &dims), (&s, &dims), &ImpulseParams::default()),
            Err(Error::DegenerateNormal)
        ));
    }

    #[test]
    fn impulse_is_symmetric() {
        let dims = VehicleDims::default();
        let a = state(0.0, 0.0, 7.0, 10.0);
        let b = state(2.0, 1.0, 2.0, 200.0);
        let p = ImpulseParams::default();
        let ab = collision_impulse((&a, &dims), (&b, &dims), &p).unwrap();
        let ba = collision_impulse((&b, &dims), (&a, &dims), &p).unwrap();
        assert!((ab - ba).abs() <= 1e-9 * ab.abs().max(1.0));
    }

    #[test]
    fn occlusion_examples() {
        let dims = VehicleDims::default();
        let av = state(0.0, 0.0, 8.0, -90.0);
        let p = OcclusionParams::default();
        assert!(occludes(&av, (&state(0.0, -10.0, 8.0, -90.0), &dims), &p));
        assert!(!occludes(&av, (&state(0.0, 10.0, 8.0, -90.0), &dims), &p));
        assert!(!occludes(&av, (&state(20.0, -20.0, 8.0, -90.0), &dims), &p));
    }

    #[test]
    fn occlusion_through_the_arc_only() {
        // Inner edge is a chord of the arc between 3 and 13 degrees, extended
        // slightly so every corner lies beyond the range; no ray touches it.
        let av = state(0.0, 0.0, 8.0, 0.0);
        let p = OcclusionParams::default();
        let on_arc = |deg: f64| (30.0 * deg.to_radians().cos(), 30.0 * deg.to_radians().sin());
        let (p1, p2) = (on_arc(3.0), on_arc(13.0));
        let d = sub(p2, p1);
        let len = norm(d);
        let u = (d.0 / len, d.1 / len);
        let n = (u.1, -u.0);
        let mid = ((p1.0 + p2.0) / 2.0, (p1.1 + p2.1) / 2.0);
        let dims = VehicleDims { length: len + 0.4, width: 2.0, l_f: 0.5, l_r: 0.5, ..VehicleDims::default() };
        let bv = state(mid.0 + n.0, mid.1 + n.1, 0.0, u.1.atan2(u.0).to_degrees());
        let rect = ObbPose::from_state(&bv, &dims);
        let sector = Sector::new((0.0, 0.0), 0.0, &p);
        assert!(rect.corners().iter().all(|&c| !sector.contains(c)));
        assert!(rect.edges().iter().all(|&(a, b)| !segments_intersect(a, b, sector.apex, sector.left)
            && !segments_intersect(a, b, sector.apex, sector.right)
            && !segments_intersect(a, b, sector.apex, (30.0, 0.0))));
        assert!(occludes(&av, (&bv, &dims), &p));
    }

    #[test]
    fn summary_reports_minimum_gap_and_contacts() {
        let dims = VehicleDims::default();
        let mk = |id, s| Vehicle { id, state: s, dims };
        let road = RoadGeometry::default();
        let scene = Scene::new(
            0.0,
            vec![
                mk(0, state(5.25, -50.0, 8.0, -90.0)),
                mk(1, state(5.25, -50.0 - 4.5 - 2.0, 8.0, -90.0)),
                mk(2, state(5.25, -50.0 + 4.5 + 5.0, 8.0, -90.0)),
                mk(3, state(5.25 + 2.0 + 9.0, -50.0, 8.0, -90.0)),
            ],
            road,
        )
        .unwrap();
        let ev = scene_geometry_summary(&scene, &OcclusionParams::default(), &ImpulseParams::default());
        assert!((ev.d_min_current - 2.0).abs() < 1e-9);
        assert!(ev.collisions.is_empty());
        assert_eq!(ev.occluding_bv_ids, vec![1]);

        let far = Scene::new(0.0, vec![mk(0, state(5.0, 0.0, 8.0, -90.0)), mk(1, state(5.0, 200.0, 8.0, -90.0))], road)
            .unwrap();
        let ev = scene_geometry_summary(&far, &OcclusionParams::default(), &ImpulseParams::default());
        assert!(ev.collisions.is_empty() && ev.occluding_bv_ids.is_empty());
    }

    #[test]
    fn summary_overlap_carries_closed_form_impulse() {
        let dims = VehicleDims::default();
        let scene = Scene::new(
            0.0,
            vec![
                Vehicle { id: 0, state: state(5.0, -50.0, 10.0, -90.0), dims },
                Vehicle { id: 1, state: state(5.0, -53.0, 0.0, -90.0), dims },
            ],
            RoadGeometry::default(),
        )
        .unwrap();
        let ev = scene_geometry_summary(&scene, &OcclusionParams::default(), &ImpulseParams::default());
        assert_eq!(ev.collisions.len(), 1);
        assert!((ev.collisions[0].j - 9000.0).abs() < 1e-9);
        assert_eq!(ev.d_min_current, 0.0);
    }
}
