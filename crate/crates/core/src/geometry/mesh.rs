use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeometryError, Ray, RigidTransform, Vec3};

/// Minimum accepted triangle area, m².
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
/// Hits closer than this to the ray origin are treated as self-intersections.
pub const HIT_EPSILON: f64 = 1e-6;

/// Counter-clockwise triangle; the outward normal follows the right-hand rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Triangle {
    pub vertices: [Vec3; 3],
    pub normal: Vec3,
}

impl Triangle {
    pub fn new(a: Vec3, b: Vec3, c: Vec3) -> Option<Self> {
        let cross = (b - a).cross(&(c - a));
        let area = cross.norm() / 2.0;
        if !(area > MIN_TRIANGLE_AREA) {
            return None;
        }
        Some(Self {
            vertices: [a, b, c],
            normal: cross / cross.norm(),
        })
    }

    /// Möller–Trumbore. Returns the ray parameter of the hit, if any.
    fn intersect(&self, ray: &Ray) -> Option<f64> {
        const DET_EPS: f64 = 1e-12;
        const BARY_EPS: f64 = 1e-12;
        let [v0, v1, v2] = self.vertices;
        let e1 = v1 - v0;
        let e2 = v2 - v0;
        let p = ray.direction.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < DET_EPS {
            return None;
        }
        let inv = 1.0 / det;
        let s = ray.origin - v0;
        let u = s.dot(&p) * inv;
        if !(-BARY_EPS..=1.0 + BARY_EPS).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = ray.direction.dot(&q) * inv;
        if v < -BARY_EPS || u + v > 1.0 + BARY_EPS {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > HIT_EPSILON).then_some(t)
    }
}

/// Static collider geometry in one user's world frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentMesh {
    pub triangles: Vec<Triangle>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceHit {
    pub point: Vec3,
    /// Unit normal facing back toward the ray origin.
    pub normal: Vec3,
    pub distance: f64,
}

impl EnvironmentMesh {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a mesh from raw vertex triples, rejecting degenerate triangles.
    pub fn from_vertices(tris: &[[Vec3; 3]]) -> Result<Self, GeometryError> {
        let triangles = tris
            .iter()
            .enumerate()
            .map(|(index, [a, b, c])| Triangle::new(*a, *b, *c).ok_or(GeometryError::DegenerateTriangle { index }))
            .collect::<Result<_, _>>()?;
        Ok(Self { triangles })
    }

    /// Appends the two triangles of a planar quad given in counter-clockwise order.
    pub fn push_quad(&mut self, corners: [Vec3; 4]) -> Result<(), GeometryError> {
        let [a, b, c, d] = corners;
        for (x, y, z) in [(a, b, c), (a, c, d)] {
            let index = self.triangles.len();
            self.triangles
                .push(Triangle::new(x, y, z).ok_or(GeometryError::DegenerateTriangle { index })?);
        }
        Ok(())
    }

    /// Horizontal square at height `y` with half-size `half`, facing +Y.
    pub fn floor(y: f64, half: f64) -> Self {
        let mut m = Self::new();
        m.push_quad([
            Vec3::new(-half, y, half),
            Vec3::new(half, y, half),
            Vec3::new(half, y, -half),
            Vec3::new(-half, y, -half),
        ])
        .expect("non-degenerate floor");
        m
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// The same geometry expressed in another frame.
    pub fn transformed(&self, t: &RigidTransform) -> Self {
        Self {
            triangles: self
                .triangles
                .iter()
                .map(|tri| Triangle {
                    vertices: tri.vertices.map(|v| t.apply_to_point(&v)),
                    normal: t.apply_to_vector(&tri.normal),
                })
                .collect(),
        }
    }

    /// Parses the plain-text triangle list: nine reals per line,
    /// whitespace-separated; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, GeometryError> {
        let mut triangles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let values = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| GeometryError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if values.len() != 9 {
                return Err(GeometryError::Parse {
                    line: i + 1,
                    message: format!("expected 9 values, found {}", values.len()),
                });
            }
            let v = |k: usize| Vec3::new(values[k], values[k + 1], values[k + 2]);
            let tri = Triangle::new(v(0), v(3), v(6)).ok_or(GeometryError::Parse {
                line: i + 1,
                message: "degenerate triangle".into(),
            })?;
            triangles.push(tri);
        }
        Ok(Self { triangles })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|e| GeometryError::Io(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x1 y1 z1 x2 y2 z2 x3 y3 z3\n");
        for t in &self.triangles {
            let vals: Vec<String> = t
                .vertices
                .iter()
                .flat_map(|v| v.iter().copied())
                .map(|x| format!("{x}"))
                .collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Nearest intersection of `ray` with `env`. Ties go to the lower triangle index.
pub fn raycast(ray: &Ray, env: &EnvironmentMesh) -> Option<SurfaceHit> {
    let mut best: Option<(f64, &Triangle)> = None;
    for tri in &env.triangles {
        if let Some(t) = tri.intersect(ray) {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, tri));
            }
        }
    }
    best.map(|(distance, tri)| {
        let normal = if tri.normal.dot(&ray.direction) > 0.0 {
            -tri.normal
        } else {
            tri.normal
        };
        SurfaceHit {
            point: ray.at(distance),
            normal,
            distance,
        }
    })
}
