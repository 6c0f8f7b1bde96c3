//! Deterministic synthetic datasets: analytic shape surfaces for
//! classification and a two-part body/cap shape for part segmentation.

use rand::{Rng, SeedableRng};

use super::sample::normalize_unit_sphere;
use super::{Dataset, PointCloud, Task};
use crate::error::{Error, Result};
use crate::tensor::Rng64;

/// Class names accepted for synthetic classification.
pub const SHAPE_CLASSES: [&str; 4] = ["sphere", "cube", "cylinder", "torus"];
/// Shape names accepted for synthetic part segmentation (two parts each).
pub const PART_SHAPES: [&str; 1] = ["capsule"];

/// Builds a synthetic dataset with `per_class` clouds per class name.
///
/// Classification clouds get a random pose (rotation about y) and scale
/// before unit-sphere normalization. Part-segmentation clouds are a cylinder
/// body (label 0) capped by a hemisphere (label 1); every cap point lies
/// strictly above the boundary plane, so labels are exactly recomputable
/// from geometry.
pub fn make_synthetic(
    task: Task,
    classes: &[String],
    per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset> {
    if per_class == 0 || n_points == 0 {
        return Err(Error::config("per_class and n_points must be positive"));
    }
    match task {
        Task::Classification => make_classification(classes, per_class, n_points, seed),
        Task::PartSeg => make_part_seg(classes, per_class, n_points, seed),
        Task::SceneSeg => Err(Error::config(
            "synthetic generation supports classification and part_seg only",
        )),
    }
}

fn class_seed(seed: u64, class: usize, index: usize) -> u64 {
    mix(seed, (class as u64) << 32 | index as u64)
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 over the combined word.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn make_classification(
    classes: &[String],
    per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes.is_empty() {
        return Err(Error::config("need at least one class name"));
    }
    for name in classes {
        if !SHAPE_CLASSES.contains(&name.as_str()) {
            return Err(Error::config(format!(
                "unknown synthetic class '{}' (expected one of {:?})",
                name, SHAPE_CLASSES
            )));
        }
    }
    let mut clouds = Vec::with_capacity(classes.len() * per_class);
    for (label, name) in classes.iter().enumerate() {
        for idx in 0..per_class {
            let mut rng = Rng64::seed_from_u64(class_seed(seed, label, idx));
            let mut points = Vec::with_capacity(n_points * 3);
            for _ in 0..n_points {
                let p = match name.as_str() {
                    "sphere" => sphere_point(&mut rng),
                    "cube" => cube_point(&mut rng),
                    "cylinder" => cylinder_point(&mut rng, 0.5, 1.4),
                    "torus" => torus_point(&mut rng, 0.7, 0.28),
                    _ => unreachable!("validated above"),
                };
                points.extend(p.map(|v| v as f32));
            }
            let raw = PointCloud::new(points, n_points, 3)?.with_cloud_label(label);
            let posed = random_pose(&raw, &mut rng);
            clouds.push(normalize_unit_sphere(&posed)?);
        }
    }
    Ok(Dataset {
        clouds,
        task: Task::Classification,
        num_classes: classes.len(),
        class_names: classes.to_vec(),
        split: "train".to_string(),
        seed,
    })
}

fn make_part_seg(
    classes: &[String],
    per_class: usize,
    n_points: usize,
    seed: u64,
) -> Result<Dataset> {
    let shapes: Vec<String> = if classes.is_empty() {
        vec!["capsule".to_string()]
    } else {
        classes.to_vec()
    };
    for name in &shapes {
        if !PART_SHAPES.contains(&name.as_str()) {
            return Err(Error::config(format!(
                "unknown synthetic part shape '{}' (expected one of {:?})",
                name, PART_SHAPES
            )));
        }
    }
    let mut clouds = Vec::with_capacity(shapes.len() * per_class);
    for (shape_idx, _) in shapes.iter().enumerate() {
        for idx in 0..per_class {
            let mut rng = Rng64::seed_from_u64(class_seed(seed, shape_idx, idx));
            clouds.push(capsule_cloud(n_points, &mut rng)?);
        }
    }
    Ok(Dataset {
        clouds,
        task: Task::PartSeg,
        num_classes: 2,
        class_names: vec!["body".to_string(), "cap".to_string()],
        split: "train".to_string(),
        seed,
    })
}

/// Cylinder body (label 0) with a hemispherical top cap (label 1), sampled
/// area-proportionally. Cap points satisfy y > h/2 strictly.
fn capsule_cloud(n_points: usize, rng: &mut Rng64) -> Result<PointCloud> {
    let r = 0.4f64;
    let h = 1.2f64;
    let lateral_area = std::f64::consts::TAU * r * h;
    let cap_area = std::f64::consts::TAU * r * r; // hemisphere: 2πr²
    let p_cap = cap_area / (lateral_area + cap_area);

    let mut points = Vec::with_capacity(n_points * 3);
    let mut labels = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        if rng.gen::<f64>() < p_cap {
            // Hemisphere direction with strictly positive y.
            let mut d;
            loop {
                d = gaussian_dir(rng);
                if d[1].abs() > 1e-9 {
                    break;
                }
            }
            let y_dir = d[1].abs();
            points.push((r * d[0]) as f32);
            points.push((h / 2.0 + r * y_dir) as f32);
            points.push((r * d[2]) as f32);
            labels.push(1);
        } else {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let y = -h / 2.0 + h * rng.gen::<f64>(); // in [-h/2, h/2)
            points.push((r * theta.cos()) as f32);
            points.push(y as f32);
            points.push((r * theta.sin()) as f32);
            labels.push(0);
        }
    }
    let raw = PointCloud::new(points, n_points, 3)?.with_point_labels(labels)?;
    // y-rotation and uniform scale preserve the horizontal boundary plane.
    let posed = random_pose(&raw, rng);
    normalize_unit_sphere(&posed)
}

fn random_pose(cloud: &PointCloud, rng: &mut Rng64) -> PointCloud {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let scale = rng.gen_range(0.7..1.3);
    let (sin, cos) = angle.sin_cos();
    let mut out = cloud.clone();
    for i in 0..cloud.n {
        let [x, y, z] = cloud.xyz(i);
        let (x, y, z) = (x as f64, y as f64, z as f64);
        out.points[i * cloud.f] = ((x * cos + z * sin) * scale) as f32;
        out.points[i * cloud.f + 1] = (y * scale) as f32;
        out.points[i * cloud.f + 2] = ((-x * sin + z * cos) * scale) as f32;
    }
    out
}

fn gaussian_dir(rng: &mut Rng64) -> [f64; 3] {
    use rand_distr::StandardNormal;
    loop {
        let v = [
            <StandardNormal as rand_distr::Distribution<f64>>::sample(&StandardNormal, rng),
            <StandardNormal as rand_distr::Distribution<f64>>::sample(&StandardNormal, rng),
            <StandardNormal as rand_distr::Distribution<f64>>::sample(&StandardNormal, rng),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-9 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn sphere_point(rng: &mut Rng64) -> [f64; 3] {
    gaussian_dir(rng)
}

fn cube_point(rng: &mut Rng64) -> [f64; 3] {
    let face = rng.gen_range(0..6usize);
    let u = rng.gen_range(-1.0..1.0);
    let v = rng.gen_range(-1.0..1.0);
    let s = if face % 2 == 0 { 1.0 } else { -1.0 };
    match face / 2 {
        0 => [s, u, v],
        1 => [u, s, v],
        _ => [u, v, s],
    }
}

fn cylinder_point(rng: &mut Rng64, r: f64, h: f64) -> [f64; 3] {
    let lateral = std::f64::consts::TAU * r * h;
    let caps = 2.0 * std::f64::consts::PI * r * r;
    if rng.gen::<f64>() < lateral / (lateral + caps) {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let y = rng.gen_range(-h / 2.0..h / 2.0);
        [r * theta.cos(), y, r * theta.sin()]
    } else {
        let y = if rng.gen::<bool>() { h / 2.0 } else { -h / 2.0 };
        let rad = r * rng.gen::<f64>().sqrt();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        [rad * theta.cos(), y, rad * theta.sin()]
    }
}

fn torus_point(rng: &mut Rng64, big_r: f64, small_r: f64) -> [f64; 3] {
    // Rejection keeps the surface density uniform in the tube angle.
    loop {
        let u = rng.gen_range(0.0..std::f64::consts::TAU);
        let v = rng.gen_range(0.0..std::f64::consts::TAU);
        let w = (big_r + small_r * v.cos()) / (big_r + small_r);
        if rng.gen::<f64>() < w {
            let ring = big_r + small_r * v.cos();
            return [ring * u.cos(), small_r * v.sin(), ring * u.sin()];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn sphere_clouds_sit_on_the_unit_sphere() {
        // Spheres normalize back onto radius 1 exactly.
        let ds = make_synthetic(Task::Classification, &names(&["sphere"]), 2, 128, 3).unwrap();
        for cloud in &ds.clouds {
            for i in 0..cloud.n {
                let [x, y, z] = cloud.xyz(i);
                let r = ((x * x + y * y + z * z) as f64).sqrt();
                assert!((r - 1.0).abs() < 1e-5, "radius {}", r);
            }
        }
    }

    #[test]
    fn part_labels_are_separated_by_a_horizontal_plane() {
        let ds = make_synthetic(Task::PartSeg, &names(&["capsule"]), 3, 256, 4).unwrap();
        for cloud in &ds.clouds {
            let labels = cloud.point_labels.as_ref().unwrap();
            let min_cap = (0..cloud.n)
                .filter(|&i| labels[i] == 1)
                .map(|i| cloud.xyz(i)[1])
                .fold(f32::INFINITY, f32::min);
            let max_body = (0..cloud.n)
                .filter(|&i| labels[i] == 0)
                .map(|i| cloud.xyz(i)[1])
                .fold(f32::NEG_INFINITY, f32::max);
            assert!(
                min_cap > max_body,
                "cap points must lie strictly above the boundary ({} vs {})",
                min_cap,
                max_body
            );
        }
    }

    #[test]
    fn class_counts_are_balanced() {
        let classes = names(&["sphere", "cube", "cylinder", "torus"]);
        let ds = make_synthetic(Task::Classification, &classes, 32, 64, 5).unwrap();
        assert_eq!(ds.clouds.len(), 128);
        let mut counts = [0usize; 4];
        for c in &ds.clouds {
            counts[c.cloud_label.unwrap()] += 1;
        }
        assert_eq!(counts, [32, 32, 32, 32]);
        ds.validate().unwrap();
    }

    #[test]
    fn unknown_class_name_is_config_error() {
        let err =
            make_synthetic(Task::Classification, &names(&["frustum"]), 1, 16, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn same_seed_reproduces_the_same_dataset() {
        let classes = names(&["cube", "torus"]);
        let a = make_synthetic(Task::Classification, &classes, 2, 64, 9).unwrap();
        let b = make_synthetic(Task::Classification, &classes, 2, 64, 9).unwrap();
        for (ca, cb) in a.clouds.iter().zip(&b.clouds) {
            assert_eq!(ca.points, cb.points);
        }
    }
}
