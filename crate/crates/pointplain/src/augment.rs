//! Seeded training-time augmentations: horizontal flip, rotation about the
//! vertical axis, uniform scaling, and translation.

use crate::error::Result;
use crate::geom::PointCloud;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct AugmentFlags {
    pub flip_x: bool,
    pub rotate_z: bool,
    pub scale: bool,
    pub translate: bool,
    pub scale_range: (f64, f64),
    /// Translation sampled per axis in ±range, meters.
    pub translate_range: f64,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip_x: true,
            rotate_z: true,
            scale: true,
            translate: true,
            scale_range: (0.8, 1.2),
            translate_range: 0.5,
        }
    }
}

impl AugmentFlags {
    pub fn none() -> Self {
        AugmentFlags {
            flip_x: false,
            rotate_z: false,
            scale: false,
            translate: false,
            ..Default::default()
        }
    }
}

/// What a particular augmentation draw did, for reproduction or inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentLog {
    pub flipped: bool,
    pub angle: f64,
    pub scale: f64,
    pub translation: [f64; 3],
}

impl AugmentLog {
    pub fn identity() -> Self {
        AugmentLog {
            flipped: false,
            angle: 0.0,
            scale: 1.0,
            translation: [0.0; 3],
        }
    }
}

pub fn rotate_z(pc: &PointCloud, angle: f64) -> Result<PointCloud> {
    let (s, c) = angle.sin_cos();
    let coords = pc
        .coords()
        .iter()
        .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
        .collect();
    let out = PointCloud::new(coords)?;
    match pc.extras() {
        Some(e) => out.with_extras(e.width, e.data.clone()),
        None => Ok(out),
    }
}

/// Composed seeded transforms in the order flip → rotate → scale →
/// translate. Disabled components touch nothing, so all-off is the
/// identity bit for bit.
pub fn augment(
    pc: &PointCloud,
    rng: &mut Rng,
    flags: &AugmentFlags,
) -> Result<(PointCloud, AugmentLog)> {
    let mut log = AugmentLog::identity();
    if flags.flip_x {
        log.flipped = rng.chance(0.5);
    }
    if flags.rotate_z {
        log.angle = rng.range(0.0, 2.0 * std::f64::consts::PI);
    }
    if flags.scale {
        log.scale = rng.range(flags.scale_range.0, flags.scale_range.1);
    }
    if flags.translate {
        for t in log.translation.iter_mut() {
            *t = rng.range(-flags.translate_range, flags.translate_range);
        }
    }

    if log == AugmentLog::identity() {
        return Ok((pc.clone(), log));
    }

    let (sin, cos) = if flags.rotate_z {
        log.angle.sin_cos()
    } else {
        (0.0, 1.0)
    };
    let coords = pc
        .coords()
        .iter()
        .map(|p| {
            let mut x = p[0];
            let y = p[1];
            let z = p[2];
            if log.flipped {
                x = -x;
            }
            let (rx, ry) = if flags.rotate_z {
                (cos * x - sin * y, sin * x + cos * y)
            } else {
                (x, y)
            };
            [
                rx * log.scale + log.translation[0],
                ry * log.scale + log.translation[1],
                z * log.scale + log.translation[2],
            ]
        })
        .collect();
    let out = PointCloud::new(coords)?;
    let out = match pc.extras() {
        Some(e) => out.with_extras(e.width, e.data.clone())?,
        None => out,
    };
    Ok((out, log))
}
