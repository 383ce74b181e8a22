//! Pinhole renderer: landmarks are drawn as flat-shaded discs with a
//! per-pixel depth test, and the visible set is derived from the same
//! coverage masks.

use nalgebra::Vector3;

use super::geometry::{CameraPose, Intrinsics, Resolution};
use super::world::SceneWorld;
use super::{CapturedImage, ConditionId, Split, WorldError};
use crate::numerics::Tensor;

pub const MIN_RESOLUTION: usize = 16;

/// Fraction of a landmark's disc that must win the depth test for the
/// landmark to count as visible.
pub const VISIBLE_FRACTION: f64 = 0.5;

/// Projection of a world point: pixel coordinates (`u` along columns,
/// `v` along rows, pixel `(r, c)` spans `[c, c+1) × [r, r+1)`) and depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(
    pose: &CameraPose,
    intrinsics: &Intrinsics,
    resolution: Resolution,
    point: &[f64; 3],
) -> Projection {
    let pc = pose.world_to_camera(&Vector3::from(*point));
    Projection {
        u: intrinsics.focal * pc.x / pc.z + resolution.width as f64 / 2.0,
        v: intrinsics.focal * pc.y / pc.z + resolution.height as f64 / 2.0,
        depth: pc.z,
    }
}

/// Pixels covered by a disc of radius `r` centred at `(u, v)`: every pixel
/// whose centre lies within `r`, plus the pixel containing the centre.
/// Returned as row-major indices, clipped to the frame.
pub fn disc_pixels(u: f64, v: f64, r: f64, res: Resolution) -> Vec<usize> {
    let (w, h) = (res.width as isize, res.height as isize);
    let mut out = Vec::new();
    let r0 = ((v - r - 0.5).ceil() as isize).max(0);
    let r1 = ((v + r - 0.5).floor() as isize).min(h - 1);
    let c0 = ((u - r - 0.5).ceil() as isize).max(0);
    let c1 = ((u + r - 0.5).floor() as isize).min(w - 1);
    let r2 = r * r;
    for row in r0..=r1 {
        let dy = row as f64 + 0.5 - v;
        for col in c0..=c1 {
            let dx = col as f64 + 0.5 - u;
            if dx * dx + dy * dy <= r2 {
                out.push((row * w + col) as usize);
            }
        }
    }
    let (cu, cv) = (u.floor(), v.floor());
    if cu >= 0.0 && cv >= 0.0 && (cu as isize) < w && (cv as isize) < h {
        let centre = (cv as isize * w + cu as isize) as usize;
        if !out.contains(&centre) {
            out.push(centre);
            out.sort_unstable();
        }
    }
    out
}

fn background(pose: &CameraPose, intrinsics: &Intrinsics, res: Resolution, row: usize, col: usize) -> [f64; 3] {
    let dir = pose.camera_to_world_dir(&Vector3::new(
        (col as f64 + 0.5 - res.width as f64 / 2.0) / intrinsics.focal,
        (row as f64 + 0.5 - res.height as f64 / 2.0) / intrinsics.focal,
        1.0,
    ));
    let elevation = dir.z / dir.norm();
    if elevation > 0.0 {
        let t = elevation.min(1.0);
        [0.62 - 0.25 * t, 0.72 - 0.15 * t, 0.86 - 0.05 * t]
    } else {
        let t = (-elevation).min(1.0);
        [0.34 + 0.1 * t, 0.32 + 0.1 * t, 0.30 + 0.08 * t]
    }
}

/// Renders `world` from `pose` under the reference condition.
pub fn render_view(
    world: &SceneWorld,
    pose: &CameraPose,
    intrinsics: &Intrinsics,
    resolution: Resolution,
) -> Result<CapturedImage, WorldError> {
    intrinsics.validate()?;
    if resolution.width < MIN_RESOLUTION || resolution.height < MIN_RESOLUTION {
        return Err(WorldError::InvalidConfig(format!(
            "resolution {}×{} is below the {MIN_RESOLUTION}×{MIN_RESOLUTION} minimum",
            resolution.width, resolution.height
        )));
    }
    let (w, h) = (resolution.width, resolution.height);

    struct Drawn {
        id: u32,
        u: f64,
        v: f64,
        r: f64,
        color: [f64; 3],
        covered: Vec<usize>,
        centre_in_frame: bool,
    }

    let mut depth = vec![f64::INFINITY; w * h];
    let mut owner: Vec<Option<usize>> = vec![None; w * h];
    let mut drawn: Vec<Drawn> = Vec::new();

    for lm in &world.landmarks {
        let p = project(pose, intrinsics, resolution, &lm.position);
        if !(p.depth > intrinsics.near && p.depth <= intrinsics.far) {
            continue;
        }
        let r = intrinsics.focal * lm.radius / p.depth;
        let covered = disc_pixels(p.u, p.v, r, resolution);
        if covered.is_empty() {
            continue;
        }
        let slot = drawn.len();
        for &px in &covered {
            // Strict comparison: equal depths keep the lower landmark id.
            if p.depth < depth[px] {
                depth[px] = p.depth;
                owner[px] = Some(slot);
            }
        }
        drawn.push(Drawn {
            id: lm.id,
            u: p.u,
            v: p.v,
            r,
            color: lm.color,
            covered,
            centre_in_frame: p.u >= 0.0 && p.v >= 0.0 && p.u < w as f64 && p.v < h as f64,
        });
    }

    let mut pixels = vec![0.0; w * h * 3];
    for row in 0..h {
        for col in 0..w {
            let px = row * w + col;
            let rgb = match owner[px] {
                Some(slot) => {
                    let d = &drawn[slot];
                    let dx = col as f64 + 0.5 - d.u;
                    let dy = row as f64 + 0.5 - d.v;
                    let falloff = if d.r > 0.0 {
                        ((dx * dx + dy * dy) / (d.r * d.r)).min(1.0)
                    } else {
                        1.0
                    };
                    d.color.map(|c| c * (1.0 - 0.35 * falloff))
                }
                None => background(pose, intrinsics, resolution, row, col),
            };
            pixels[px * 3..px * 3 + 3].copy_from_slice(&rgb);
        }
    }

    let mut visible_ids: Vec<u32> = drawn
        .iter()
        .enumerate()
        .filter(|(slot, d)| {
            let owned = d.covered.iter().filter(|&&px| owner[px] == Some(*slot)).count();
            d.centre_in_frame && owned as f64 >= VISIBLE_FRACTION * d.covered.len() as f64
        })
        .map(|(_, d)| d.id)
        .collect();
    visible_ids.sort_unstable();

    Ok(CapturedImage {
        image_id: 0,
        split: Split::Reference,
        condition: ConditionId::REFERENCE,
        pose: *pose,
        pixels: Tensor::new(vec![h, w, 3], pixels).expect("pixel buffer matches resolution"),
        visible_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::world::{Extent, Landmark};

    fn world_with(landmarks: Vec<Landmark>) -> SceneWorld {
        SceneWorld {
            landmarks,
            extent: Extent {
                min: [-100.0; 3],
                max: [100.0; 3],
            },
            seed: 0,
        }
    }

    fn intr(f: f64) -> Intrinsics {
        Intrinsics {
            focal: f,
            near: 0.1,
            far: 100.0,
        }
    }

    #[test]
    fn facing_away_sees_nothing() {
        let world = world_with(vec![Landmark {
            id: 0,
            position: [0.0, 0.0, -5.0],
            color: [1.0, 0.0, 0.0],
            radius: 0.5,
        }]);
        let img = render_view(&world, &CameraPose::identity(), &intr(32.0), Resolution::square(32)).unwrap();
        assert!(img.visible_ids.is_empty());
        let bg = world_with(vec![]);
        let empty = render_view(&bg, &CameraPose::identity(), &intr(32.0), Resolution::square(32)).unwrap();
        assert_eq!(img.pixels, empty.pixels);
    }

    #[test]
    fn on_axis_landmark_hits_centre_pixel() {
        let world = world_with(vec![Landmark {
            id: 3,
            position: [0.0, 0.0, 5.0],
            color: [0.9, 0.1, 0.2],
            radius: 0.01,
        }]);
        let res = Resolution::square(64);
        let img = render_view(&world, &CameraPose::identity(), &intr(32.0), res).unwrap();
        assert_eq!(img.visible_ids, vec![3]);
        let centre = (32 * 64 + 32) * 3;
        assert!((img.pixels.data()[centre] - 0.9 * 0.65).abs() < 0.4);
        assert!(img.pixels.data()[centre + 1] < 0.1);
    }

    #[test]
    fn zero_focal_and_tiny_resolution_rejected() {
        let world = world_with(vec![]);
        assert!(matches!(
            render_view(&world, &CameraPose::identity(), &intr(0.0), Resolution::square(32)),
            Err(WorldError::DegenerateIntrinsics(_))
        ));
        assert!(render_view(&world, &CameraPose::identity(), &intr(32.0), Resolution::square(8)).is_err());
    }

    #[test]
    fn nearer_landmark_occludes_farther() {
        let world = world_with(vec![
            Landmark {
                id: 0,
                position: [0.0, 0.0, 10.0],
                color: [1.0, 0.0, 0.0],
                radius: 1.0,
            },
            Landmark {
                id: 1,
                position: [0.0, 0.0, 5.0],
                color: [0.0, 1.0, 0.0],
                radius: 1.0,
            },
        ]);
        let img = render_view(&world, &CameraPose::identity(), &intr(32.0), Resolution::square(32)).unwrap();
        assert_eq!(img.visible_ids, vec![1]);
    }
}
