//! Surface sampling, unit-sphere normalization, and augmentation.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use super::{PointCloud, TriangleMesh};
use crate::error::{Error, Result};
use crate::tensor::Rng64;

/// Uniform surface samples: faces drawn with probability proportional to
/// area, positions by square-root barycentric sampling inside the face.
/// Deterministic for a fixed seed.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::data("cannot sample 0 points"));
    }
    if mesh.faces.is_empty() {
        return Err(Error::data("mesh has no faces to sample"));
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len() + 1);
    cumulative.push(0.0f64);
    for i in 0..mesh.faces.len() {
        let last = *cumulative.last().expect("seeded with 0");
        cumulative.push(last + mesh.face_area(i));
    }
    let total = *cumulative.last().expect("seeded with 0");
    if total <= 0.0 {
        return Err(Error::data("mesh surface area is zero"));
    }

    let mut rng = Rng64::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let target = rng.gen::<f64>() * total;
        // First cumulative bound strictly above the draw.
        let face = cumulative.partition_point(|&c| c <= target).min(mesh.faces.len()) - 1;
        let [ia, ib, ic] = mesh.faces[face];
        let (a, b, c) = (mesh.vertices[ia], mesh.vertices[ib], mesh.vertices[ic]);
        let su = rng.gen::<f64>().sqrt();
        let v = rng.gen::<f64>();
        let wa = 1.0 - su;
        let wb = su * (1.0 - v);
        let wc = su * v;
        for d in 0..3 {
            points.push((wa * a[d] as f64 + wb * b[d] as f64 + wc * c[d] as f64) as f32);
        }
    }
    PointCloud::new(points, n, 3)
}

/// Centers xyz at the centroid and scales by the maximum norm so the cloud
/// fits the unit sphere exactly. Extra attribute columns pass through
/// untouched. Idempotent.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    let (n, f) = (cloud.n, cloud.f);
    let mut centroid = [0.0f64; 3];
    for i in 0..n {
        let p = cloud.xyz(i);
        for d in 0..3 {
            centroid[d] += p[d] as f64;
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let mut max_norm = 0.0f64;
    for i in 0..n {
        let p = cloud.xyz(i);
        let mut sq = 0.0;
        for d in 0..3 {
            let v = p[d] as f64 - centroid[d];
            sq += v * v;
        }
        max_norm = max_norm.max(sq.sqrt());
    }
    if max_norm < 1e-12 {
        return Err(Error::data(
            "cannot normalize a cloud of coincident points (scale undefined)",
        ));
    }
    let mut out = cloud.clone();
    for i in 0..n {
        for d in 0..3 {
            let v = cloud.points[i * f + d] as f64;
            out.points[i * f + d] = ((v - centroid[d]) / max_norm) as f32;
        }
    }
    Ok(out)
}

/// Standard jitter parameters.
pub const JITTER_SIGMA: f64 = 0.01;
pub const JITTER_CLIP: f64 = 0.05;

/// Random rotation about the vertical (y) axis followed by clipped Gaussian
/// jitter on xyz. Labels and extra attribute columns are untouched.
pub fn augment(cloud: &PointCloud, seed: u64) -> PointCloud {
    let mut rng = Rng64::seed_from_u64(seed);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    augment_with(cloud, angle, JITTER_SIGMA, JITTER_CLIP, &mut rng)
}

/// Deterministic core of [`augment`]; zero angle and zero sigma give the
/// identity.
pub fn augment_with(
    cloud: &PointCloud,
    angle: f64,
    jitter_sigma: f64,
    jitter_clip: f64,
    rng: &mut Rng64,
) -> PointCloud {
    let (sin, cos) = angle.sin_cos();
    let normal = if jitter_sigma > 0.0 {
        Some(Normal::new(0.0f64, jitter_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut out = cloud.clone();
    let f = cloud.f;
    for i in 0..cloud.n {
        let [x, y, z] = cloud.xyz(i);
        let (x, y, z) = (x as f64, y as f64, z as f64);
        let mut p = [x * cos + z * sin, y, -x * sin + z * cos];
        if let Some(dist) = normal {
            for v in p.iter_mut() {
                let j = dist.sample(rng).clamp(-jitter_clip, jitter_clip);
                *v += j;
            }
        }
        for d in 0..3 {
            out.points[i * f + d] = p[d] as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mesh::parse_mesh;
    use crate::data::MeshFormat;

    fn unit_triangle() -> TriangleMesh {
        TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn samples_stay_on_the_triangle_plane() {
        // Plane z = 0, and the barycentric weights keep points inside.
        let cloud = sample_surface(&unit_triangle(), 500, 9).unwrap();
        for i in 0..cloud.n {
            let [x, y, z] = cloud.xyz(i);
            assert!(z.abs() < 1e-6);
            assert!(x >= -1e-6 && y >= -1e-6 && x + y <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn face_selection_is_area_weighted() {
        // Two triangles with areas 1 and 3: the larger catches ~75%.
        let mesh = TriangleMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [2.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 5.0],
                [3.0, 0.0, 5.0],
                [0.0, 2.0, 5.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 10_000;
        let cloud = sample_surface(&mesh, n, 4).unwrap();
        let near_big = (0..n)
            .filter(|&i| (cloud.xyz(i)[2] - 5.0).abs() < 1e-3)
            .count();
        let frac = near_big as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.03, "frac {}", frac);
    }

    #[test]
    fn cube_faces_are_hit_uniformly() {
        let text = "\
v -1 -1 -1\nv 1 -1 -1\nv 1 1 -1\nv -1 1 -1\nv -1 -1 1\nv 1 -1 1\nv 1 1 1\nv -1 1 1\n\
f 1 2 3 4\nf 5 6 7 8\nf 1 2 6 5\nf 4 3 7 8\nf 1 4 8 5\nf 2 3 7 6\n";
        let mesh = parse_mesh(text, MeshFormat::Obj, "cube.obj").unwrap();
        let n = 10_000;
        let cloud = sample_surface(&mesh, n, 5).unwrap();
        let mut hits = [0usize; 6];
        for i in 0..n {
            let [x, y, z] = cloud.xyz(i);
            let (ax, ay, az) = (x.abs(), y.abs(), z.abs());
            let side = if az >= ax && az >= ay {
                if z > 0.0 { 1 } else { 0 }
            } else if ay >= ax {
                if y > 0.0 { 3 } else { 2 }
            } else if x > 0.0 {
                5
            } else {
                4
            };
            hits[side] += 1;
        }
        for (i, &h) in hits.iter().enumerate() {
            let frac = h as f64 / n as f64;
            assert!(
                (frac - 1.0 / 6.0).abs() < 0.02,
                "face {} fraction {}",
                i,
                frac
            );
        }
    }

    #[test]
    fn zero_area_mesh_is_data_error() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0; 3], [0.0; 3], [0.0; 3]],
            faces: vec![[0, 1, 2]],
        };
        assert!(sample_surface(&mesh, 10, 0).is_err());
    }

    #[test]
    fn normalize_hand_case() {
        let cloud = PointCloud::new(vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0], 2, 3).unwrap();
        let out = normalize_unit_sphere(&cloud).unwrap();
        assert!((out.xyz(0)[0] + 1.0).abs() < 1e-6);
        assert!((out.xyz(1)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_is_idempotent_and_satisfies_invariants() {
        let mesh = unit_triangle();
        let cloud = sample_surface(&mesh, 200, 6).unwrap();
        let once = normalize_unit_sphere(&cloud).unwrap();
        let twice = normalize_unit_sphere(&once).unwrap();
        let mut centroid = [0.0f64; 3];
        let mut max_norm = 0.0f64;
        for i in 0..once.n {
            let p = once.xyz(i);
            for d in 0..3 {
                centroid[d] += p[d] as f64;
            }
            let norm = (p[0] as f64).hypot(p[1] as f64).hypot(p[2] as f64);
            max_norm = max_norm.max(norm);
        }
        for c in centroid {
            assert!((c / once.n as f64).abs() < 1e-6);
        }
        assert!((max_norm - 1.0).abs() < 1e-6);
        for (a, b) in once.points.iter().zip(&twice.points) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_keeps_extra_attribute_columns_bit_identical() {
        let points = vec![
            0.0, 0.0, 0.0, 0.125, 9.5, //
            2.0, 1.0, -1.0, 0.625, -3.5,
        ];
        let cloud = PointCloud::new(points, 2, 5).unwrap();
        let out = normalize_unit_sphere(&cloud).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i)[3..], cloud.row(i)[3..]);
        }
    }

    #[test]
    fn coincident_points_are_data_error() {
        let cloud = PointCloud::new(vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0], 2, 3).unwrap();
        assert!(normalize_unit_sphere(&cloud).is_err());
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        use rand::SeedableRng;
        let cloud = sample_surface(&unit_triangle(), 50, 7).unwrap();
        let mut rng = Rng64::seed_from_u64(0);
        let out = augment_with(&cloud, 0.0, 0.0, JITTER_CLIP, &mut rng);
        assert_eq!(out.points, cloud.points);
    }

    #[test]
    fn rotation_preserves_distances_and_height() {
        use rand::SeedableRng;
        let cloud = sample_surface(&unit_triangle(), 40, 8).unwrap();
        let mut rng = Rng64::seed_from_u64(0);
        let rotated = augment_with(&cloud, 1.234, 0.0, JITTER_CLIP, &mut rng);
        for i in 0..cloud.n {
            assert!((rotated.xyz(i)[1] - cloud.xyz(i)[1]).abs() < 1e-6);
            for j in (i + 1)..cloud.n {
                let d0 = dist(cloud.xyz(i), cloud.xyz(j));
                let d1 = dist(rotated.xyz(i), rotated.xyz(j));
                assert!((d0 - d1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn jitter_never_exceeds_the_clip() {
        use rand::SeedableRng;
        let cloud = sample_surface(&unit_triangle(), 200, 9).unwrap();
        let mut rng = Rng64::seed_from_u64(1);
        // Huge sigma so that clipping actually binds.
        let out = augment_with(&cloud, 0.0, 10.0, JITTER_CLIP, &mut rng);
        for i in 0..cloud.n {
            for d in 0..3 {
                let delta = (out.xyz(i)[d] - cloud.xyz(i)[d]).abs();
                assert!(delta as f64 <= JITTER_CLIP + 1e-6, "delta {}", delta);
            }
        }
    }

    #[test]
    fn augment_preserves_counts_and_labels() {
        let cloud = PointCloud::new(vec![0.0; 4 * 3], 4, 3)
            .unwrap()
            .with_point_labels(vec![0, 1, 1, 0])
            .unwrap();
        let out = augment(&cloud, 42);
        assert_eq!(out.n, 4);
        assert_eq!(out.f, 3);
        assert_eq!(out.point_labels, Some(vec![0, 1, 1, 0]));
    }

    fn dist(a: [f32; 3], b: [f32; 3]) -> f64 {
        let dx = (a[0] - b[0]) as f64;
        let dy = (a[1] - b[1]) as f64;
        let dz = (a[2] - b[2]) as f64;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}
