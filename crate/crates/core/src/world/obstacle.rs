use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::kinematics::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Box with the given half-extents along the obstacle frame axes.
    Cuboid { half_extents: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub shape: Shape,
    pub pose: Pose,
    #[serde(default = "zero3")]
    pub velocity: [f64; 3],
    #[serde(default)]
    pub dynamic: bool,
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

impl Obstacle {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Obstacle {
            shape: Shape::Sphere { radius },
            pose: Pose::new(center, Default::default()),
            velocity: [0.0; 3],
            dynamic: false,
        }
    }

    pub fn cuboid(center: Vector3<f64>, half_extents: [f64; 3]) -> Self {
        Obstacle {
            shape: Shape::Cuboid { half_extents },
            pose: Pose::new(center, Default::default()),
            velocity: [0.0; 3],
            dynamic: false,
        }
    }

    pub fn moving(mut self, velocity: Vector3<f64>) -> Self {
        self.velocity = velocity.into();
        self.dynamic = true;
        self
    }

    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::from(self.velocity)
    }

    pub fn is_valid(&self) -> bool {
        match self.shape {
            Shape::Sphere { radius } => radius > 0.0 && radius.is_finite(),
            Shape::Cuboid { half_extents } => half_extents.iter().all(|h| *h > 0.0 && h.is_finite()),
        }
    }

    /// Radius of a sphere around `pose.position` enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            Shape::Sphere { radius } => radius,
            Shape::Cuboid { half_extents } => Vector3::from(half_extents).norm(),
        }
    }
}

/// Surface-to-surface signed distance between a sphere and an obstacle;
/// negative when they interpenetrate.
pub fn signed_distance(center: &Vector3<f64>, radius: f64, obstacle: &Obstacle) -> f64 {
    match obstacle.shape {
        Shape::Sphere { radius: r } => (center - obstacle.pose.position).norm() - (radius + r),
        Shape::Cuboid { half_extents } => {
            let local = obstacle.pose.orientation.inverse_transform_vector(&(center - obstacle.pose.position));
            let q = local.abs() - Vector3::from(half_extents);
            let outside = q.map(|v| v.max(0.0)).norm();
            let inside = q.max().min(0.0);
            outside + inside - radius
        }
    }
}

/// Constant-velocity motion of dynamic obstacles; static ones stay put.
pub fn advance_obstacles(obstacles: &[Obstacle], dt: f64) -> Vec<Obstacle> {
    obstacles
        .iter()
        .map(|o| {
            let mut o = o.clone();
            if o.dynamic {
                o.pose.position += o.velocity() * dt;
            }
            o
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    /// Distance from `p` to the box surface by enumerating the six face
    /// rectangles, signed by an inside test.
    fn box_oracle(p: &Vector3<f64>, h: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            for sign in [-1.0, 1.0] {
                let mut nearest = *p;
                nearest[axis] = sign * h[axis];
                for other in 0..3 {
                    if other != axis {
                        nearest[other] = p[other].clamp(-h[other], h[other]);
                    }
                }
                best = best.min((p - nearest).norm());
            }
        }
        let inside = (0..3).all(|i| p[i].abs() <= h[i]);
        if inside {
            -best
        } else {
            best
        }
    }

    #[test]
    fn sphere_sphere_arithmetic() {
        let o = Obstacle::sphere(Vector3::new(1.0, 0.0, 0.0), 0.2);
        assert!((signed_distance(&Vector3::zeros(), 0.1, &o) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn center_on_box_face() {
        let o = Obstacle::cuboid(Vector3::zeros(), [0.5, 0.5, 0.5]);
        assert!((signed_distance(&Vector3::new(0.5, 0.1, -0.2), 0.1, &o) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn dense_face_sampling_agrees() {
        // Coarse check of the exact oracle against brute-force surface samples.
        let h = [0.3, 0.2, 0.1];
        let p = Vector3::new(0.45, -0.31, 0.22);
        let steps = 200;
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            for sign in [-1.0, 1.0] {
                for i in 0..=steps {
                    for j in 0..=steps {
                        let mut s = Vector3::zeros();
                        s[axis] = sign * h[axis];
                        s[u] = -h[u] + 2.0 * h[u] * i as f64 / steps as f64;
                        s[v] = -h[v] + 2.0 * h[v] * j as f64 / steps as f64;
                        best = best.min((p - s).norm());
                    }
                }
            }
        }
        let o = Obstacle::cuboid(Vector3::zeros(), h);
        let sd = signed_distance(&p, 0.0, &o);
        assert!((sd - best).abs() < 3e-3);
        assert!((sd - box_oracle(&p, &h)).abs() < 1e-12);
    }

    #[test]
    fn obstacle_motion() {
        let still = Obstacle::cuboid(Vector3::new(0.1, 0.2, 0.3), [0.1; 3]);
        assert_eq!(advance_obstacles(std::slice::from_ref(&still), 0.5)[0], still);
        let moving = still.clone().moving(Vector3::new(1.0, 0.0, 0.0));
        let a = advance_obstacles(std::slice::from_ref(&moving), 0.1);
        assert!((a[0].pose.position.x - 0.2).abs() < 1e-15);
        let half = advance_obstacles(&advance_obstacles(std::slice::from_ref(&moving), 0.05), 0.05);
        assert!((half[0].pose.position - a[0].pose.position).norm() < 1e-15);
    }

    #[test]
    fn continuous_across_box_features() {
        // Probe a fine grid straddling faces, edges and corners: neighbouring
        // samples never jump by more than the grid spacing.
        let o = Obstacle::cuboid(Vector3::new(0.1, -0.2, 0.3), [0.2, 0.1, 0.15]);
        let step = 0.01;
        for i in -40..40 {
            for j in -30..30 {
                for k in -35..35 {
                    let p = o.pose.position + Vector3::new(i as f64, j as f64, k as f64) * step;
                    let d = signed_distance(&p, 0.05, &o);
                    let dx = signed_distance(&(p + Vector3::new(step, 0.0, 0.0)), 0.05, &o);
                    assert!((d - dx).abs() <= step + 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn box_matches_face_oracle(
            p in proptest::collection::vec(-1.0f64..1.0, 3),
            h in proptest::collection::vec(0.01f64..0.5, 3),
            r in 0.0f64..0.2,
            rot in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let rotation = UnitQuaternion::from_euler_angles(rot[0], rot[1], rot[2]);
            let center = Vector3::new(0.2, -0.1, 0.4);
            let o = Obstacle {
                shape: Shape::Cuboid { half_extents: [h[0], h[1], h[2]] },
                pose: Pose::new(center, rotation),
                velocity: [0.0; 3],
                dynamic: false,
            };
            let world = center + rotation * Vector3::new(p[0], p[1], p[2]);
            let expected = box_oracle(&Vector3::new(p[0], p[1], p[2]), &[h[0], h[1], h[2]]) - r;
            prop_assert!((signed_distance(&world, r, &o) - expected).abs() < 1e-9);
        }

        #[test]
        fn sphere_distance_is_symmetric(a in proptest::collection::vec(-1.0f64..1.0, 3), b in proptest::collection::vec(-1.0f64..1.0, 3), ra in 0.01f64..0.3, rb in 0.01f64..0.3) {
            let (ca, cb) = (Vector3::new(a[0], a[1], a[2]), Vector3::new(b[0], b[1], b[2]));
            let ab = signed_distance(&ca, ra, &Obstacle::sphere(cb, rb));
            let ba = signed_distance(&cb, rb, &Obstacle::sphere(ca, ra));
            prop_assert_eq!(ab, ba);
        }
    }
}
