//! Procedural 3D head phantoms with a parameterized facial profile.
//!
//! Coordinates are fractions of the volume extent: axis 0 is lateral
//! (sagittal slices), axis 1 runs superior to inferior, axis 2 runs
//! anterior (index 0, where the face is) to posterior.
//!
//! Each head is an ellipsoid with a scalp layer, a bright skull rim and a
//! textured brain. A face is attached to the lower anterior part of the
//! head: soft tissue whose front surface is the skull front pushed forward
//! by a forehead plate, a nose, lips and a chin. The face carries a bony
//! band a few millimetres under the skin so that superficial blurring leaves
//! deeper structure behind.

use rand::Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use thiserror::Error;

use crate::rng::{self, Stream};
use crate::volume::{Volume, VolumeHeader};

/// Field of view (mm) of the 150×256×256 T1 geometry at 1.2×0.938×0.938 mm.
pub const FIELD_OF_VIEW_MM: [f64; 3] = [150.0 * 1.2, 256.0 * 0.938, 256.0 * 0.938];
pub const MIN_DIM: usize = 32;

pub const NOSE_LENGTH: (f64, f64) = (0.05, 0.20);
pub const NOSE_ANGLE_DEG: (f64, f64) = (-20.0, 20.0);
pub const LIP_PROTRUSION: (f64, f64) = (0.0, 0.06);
pub const CHIN_EXTENT: (f64, f64) = (0.0, 0.08);
pub const FOREHEAD_SLOPE: (f64, f64) = (-0.15, 0.15);
/// Anterior-posterior semi-axis of the outer head ellipse.
pub const SKULL_AXIS_AP: (f64, f64) = (0.28, 0.32);
/// Superior-inferior semi-axis of the outer head ellipse.
pub const SKULL_AXIS_SI: (f64, f64) = (0.36, 0.42);

const LATERAL_SEMI_AXIS: f64 = 0.40;
const CENTER_SI: f64 = 0.45;
const CENTER_AP: f64 = 0.63;
const SCALP: f64 = 0.035;
const SKULL: f64 = 0.045;
const FACE_HALF_WIDTH: f64 = 0.34;
const NOSE_HALF_WIDTH: f64 = 0.11;
const FACE_SKIN: f64 = 0.035;
const FACE_BONE: (f64, f64) = (0.055, 0.08);

pub const SKIN_LEVEL: f64 = 0.8;
pub const SKULL_LEVEL: f64 = 1.1;
pub const BRAIN_LEVEL: f64 = 0.5;
pub const BRAIN_SPREAD: f64 = 0.15;
pub const FACE_BONE_LEVEL: f64 = 1.0;
pub const FACE_TISSUE_LEVEL: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceParams {
    /// Fraction of the image width.
    pub nose_length: f64,
    /// Degrees; positive tilts the tip downward.
    pub nose_angle: f64,
    pub lip_protrusion: f64,
    pub chin_extent: f64,
    pub forehead_slope: f64,
    /// `[anterior-posterior, superior-inferior]` semi-axes.
    pub skull_axes: [f64; 2],
    pub texture_seed: u64,
}

impl FaceParams {
    /// Every field at the middle of its range.
    pub fn midrange(texture_seed: u64) -> Self {
        let mid = |(lo, hi): (f64, f64)| 0.5 * (lo + hi);
        Self {
            nose_length: mid(NOSE_LENGTH),
            nose_angle: mid(NOSE_ANGLE_DEG),
            lip_protrusion: mid(LIP_PROTRUSION),
            chin_extent: mid(CHIN_EXTENT),
            forehead_slope: mid(FOREHEAD_SLOPE),
            skull_axes: [mid(SKULL_AXIS_AP), mid(SKULL_AXIS_SI)],
            texture_seed,
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(self.nose_length, NOSE_LENGTH)
            && within(self.nose_angle, NOSE_ANGLE_DEG)
            && within(self.lip_protrusion, LIP_PROTRUSION)
            && within(self.chin_extent, CHIN_EXTENT)
            && within(self.forehead_slope, FOREHEAD_SLOPE)
            && within(self.skull_axes[0], SKULL_AXIS_AP)
            && within(self.skull_axes[1], SKULL_AXIS_SI)
    }
}

pub fn sample_face_params(rng: &mut Stream) -> FaceParams {
    let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..=hi);
    let nose_length = draw(NOSE_LENGTH);
    let nose_angle = draw(NOSE_ANGLE_DEG);
    let lip_protrusion = draw(LIP_PROTRUSION);
    let chin_extent = draw(CHIN_EXTENT);
    let forehead_slope = draw(FOREHEAD_SLOPE);
    let skull_axes = [draw(SKULL_AXIS_AP), draw(SKULL_AXIS_SI)];
    FaceParams {
        nose_length,
        nose_angle,
        lip_protrusion,
        chin_extent,
        forehead_slope,
        skull_axes,
        texture_seed: rng.random(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Background,
    Scalp,
    Skull,
    Brain,
    FaceSkin,
    FaceBone,
    FaceTissue,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RenderOptions {
    /// Zero everything anterior to this fraction of the A-P axis, mimicking
    /// heads cut against the field of view. Off by default.
    pub anterior_cut: Option<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("phantom dims must be >= {MIN_DIM} per axis, got {0:?}")]
    DimsTooSmall([usize; 3]),
    #[error("cohort must contain at least one subject")]
    EmptyCohort,
}

#[derive(Debug, Clone)]
pub struct PhantomSubject {
    pub subject_id: u32,
    pub params: FaceParams,
    pub volume: Volume,
}

/// Voxel spacing that keeps the reference field of view at any grid size.
pub fn voxel_size_for(dims: [usize; 3]) -> [f64; 3] {
    [
        FIELD_OF_VIEW_MM[0] / dims[0] as f64,
        FIELD_OF_VIEW_MM[1] / dims[1] as f64,
        FIELD_OF_VIEW_MM[2] / dims[2] as f64,
    ]
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn gaussian(x: f64, center: f64, sigma: f64) -> f64 {
    let d = (x - center) / sigma;
    (-0.5 * d * d).exp()
}

fn lateral_falloff(t: f64, half_width: f64) -> f64 {
    (1.0 - (t / half_width).powi(2)).max(0.0).sqrt()
}

/// Per-subject facial geometry evaluated on fractional coordinates.
struct FaceShape {
    p: FaceParams,
    v_tip: f64,
    v_root: f64,
    v_lips: f64,
    v_chin: f64,
    v_top: f64,
    v_bottom: f64,
}

impl FaceShape {
    fn new(p: FaceParams) -> Self {
        let si = p.skull_axes[1];
        let v_root = CENTER_SI - 0.01;
        let v_tip = CENTER_SI + 0.13 + 0.08 * p.nose_angle.to_radians().sin();
        Self {
            p,
            v_tip,
            v_root,
            v_lips: v_tip + 0.08,
            v_chin: v_tip + 0.15,
            v_top: CENTER_SI - 0.10,
            v_bottom: CENTER_SI + 0.95 * si,
        }
    }

    /// Half-chord of the head ellipse at lateral `t` and row `v`, in units of
    /// the A-P semi-axis; `None` where the row misses the head.
    fn head_chord(&self, t: f64, v: f64) -> Option<f64> {
        let q = (v - CENTER_SI) / self.p.skull_axes[1];
        let r = 1.0 - (t / LATERAL_SEMI_AXIS).powi(2) - q * q;
        (r > 0.0).then(|| r.sqrt())
    }

    fn nose(&self, v: f64) -> f64 {
        let len = self.p.nose_length;
        if v < self.v_root {
            0.0
        } else if v <= self.v_tip {
            len * (v - self.v_root) / (self.v_tip - self.v_root)
        } else {
            len * (1.0 - (v - self.v_tip) / 0.04).max(0.0)
        }
    }

    /// How far (fraction of width) the face surface sits in front of the
    /// head ellipse at lateral `t`, row `v`.
    fn protrusion(&self, t: f64, v: f64) -> f64 {
        let Some(chord) = self.head_chord(t, v) else {
            return 0.0;
        };
        let window = smoothstep((v - self.v_top) / 0.08) * (1.0 - smoothstep((v - (self.v_bottom - 0.06)) / 0.06));
        if window == 0.0 {
            return 0.0;
        }
        let a_ap = self.p.skull_axes[0];
        let ellipse_front = CENTER_AP - a_ap * chord;
        let plate = (CENTER_AP - a_ap) - 0.03 - self.p.forehead_slope * (v - (CENTER_SI + 0.2));
        let features = lateral_falloff(t, NOSE_HALF_WIDTH) * self.nose(v)
            + self.p.lip_protrusion * gaussian(v, self.v_lips, 0.022)
            + self.p.chin_extent * gaussian(v, self.v_chin, 0.025);
        let target = plate - features;
        window * lateral_falloff(t, FACE_HALF_WIDTH) * smoothstep(chord / 0.3) * (ellipse_front - target).max(0.0)
    }
}

fn ellipsoid_level(t: f64, v: f64, w: f64, axes: [f64; 2], shrink: f64) -> f64 {
    (t / (LATERAL_SEMI_AXIS - shrink)).powi(2)
        + ((v - CENTER_SI) / (axes[1] - shrink)).powi(2)
        + ((w - CENTER_AP) / (axes[0] - shrink)).powi(2)
}

/// Uniform noise box-blurred three times per axis, scaled to unit variance.
fn texture_field(dims: [usize; 3], rng: &mut Stream) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let mut field: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut scratch = vec![0.0; n];
    let strides = [dims[1] * dims[2], dims[2], 1];
    for _ in 0..3 {
        for axis in 0..3 {
            box_blur_axis(&field, &mut scratch, dims, strides, axis);
            std::mem::swap(&mut field, &mut scratch);
        }
    }
    // Var(U(-1,1)) = 1/3; each 3-tap box pass applied thrice scales the
    // per-axis variance by 141/729.
    let sigma = (1.0 / 3.0 * (141.0f64 / 729.0).powi(3)).sqrt();
    field.iter_mut().for_each(|v| *v /= sigma);
    field
}

fn box_blur_axis(src: &[f64], dst: &mut [f64], dims: [usize; 3], strides: [usize; 3], axis: usize) {
    let len = dims[axis];
    let stride = strides[axis];
    for (i, out) in dst.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let prev = if pos == 0 { i + stride } else { i - stride };
        let next = if pos + 1 == len { i - stride } else { i + stride };
        *out = (src[prev] + src[i] + src[next]) / 3.0;
    }
}

pub fn render_phantom(params: &FaceParams, dims: [usize; 3], rng: &mut Stream) -> Result<Volume, PhantomError> {
    render_phantom_with(params, dims, rng, &RenderOptions::default()).map(|(v, _)| v)
}

/// Renders the volume together with its per-voxel tissue labels.
pub fn render_phantom_with(
    params: &FaceParams,
    dims: [usize; 3],
    rng: &mut Stream,
    options: &RenderOptions,
) -> Result<(Volume, Vec<Tissue>), PhantomError> {
    if dims.iter().any(|&d| d < MIN_DIM) {
        return Err(PhantomError::DimsTooSmall(dims));
    }
    let texture = texture_field(dims, rng);
    let shape = FaceShape::new(*params);
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut data = vec![0.0; n];
    let mut labels = vec![Tissue::Background; n];

    for x in 0..nx {
        let t = (x as f64 + 0.5) / nx as f64 - 0.5;
        for y in 0..ny {
            let v = (y as f64 + 0.5) / ny as f64;
            let protrusion = shape.protrusion(t, v);
            let face_front = shape
                .head_chord(t, v)
                .map(|c| CENTER_AP - params.skull_axes[0] * c - protrusion);
            let bony = protrusion > FACE_BONE.1 + 0.01;
            for z in 0..nz {
                let w = (z as f64 + 0.5) / nz as f64;
                if options.anterior_cut.is_some_and(|cut| w < cut) {
                    continue;
                }
                let idx = (x * ny + y) * nz + z;
                let tissue = if ellipsoid_level(t, v, w, params.skull_axes, 0.0) <= 1.0 {
                    if ellipsoid_level(t, v, w, params.skull_axes, SCALP + SKULL) <= 1.0 {
                        Tissue::Brain
                    } else if ellipsoid_level(t, v, w, params.skull_axes, SCALP) <= 1.0 {
                        Tissue::Skull
                    } else {
                        Tissue::Scalp
                    }
                } else {
                    match face_front {
                        Some(front) if protrusion > 0.0 && w >= front && w < CENTER_AP => {
                            let depth = w - front;
                            if depth < FACE_SKIN {
                                Tissue::FaceSkin
                            } else if bony && (FACE_BONE.0..FACE_BONE.1).contains(&depth) {
                                Tissue::FaceBone
                            } else {
                                Tissue::FaceTissue
                            }
                        }
                        _ => Tissue::Background,
                    }
                };
                let noise = texture[idx];
                data[idx] = match tissue {
                    Tissue::Background => 0.0,
                    Tissue::Scalp | Tissue::FaceSkin => (SKIN_LEVEL + 0.03 * noise).clamp(0.7, 0.9),
                    Tissue::Skull => SKULL_LEVEL,
                    Tissue::Brain => (BRAIN_LEVEL + BRAIN_SPREAD * noise).clamp(0.05, 0.95),
                    Tissue::FaceBone => FACE_BONE_LEVEL,
                    Tissue::FaceTissue => (FACE_TISSUE_LEVEL + 0.08 * noise).clamp(0.3, 0.9),
                };
                labels[idx] = tissue;
            }
        }
    }

    let header = VolumeHeader::new(dims, voxel_size_for(dims));
    let volume = Volume::new(header, data).expect("phantom geometry is valid by construction");
    Ok((volume, labels))
}

/// Subject `index` of the cohort keyed by `master_seed`.
pub fn generate_subject(
    index: u32,
    dims: [usize; 3],
    master_seed: u64,
    options: &RenderOptions,
) -> Result<PhantomSubject, PhantomError> {
    let mut stream = rng::stream(master_seed, u64::from(index));
    let params = sample_face_params(&mut stream);
    let mut texture_rng = Stream::seed_from_u64(params.texture_seed);
    let (volume, _) = render_phantom_with(&params, dims, &mut texture_rng, options)?;
    Ok(PhantomSubject {
        subject_id: index,
        params,
        volume,
    })
}

/// Renders subjects `0..n_subjects` in parallel. Output order and content do
/// not depend on the thread count.
pub fn generate_cohort(
    n_subjects: u32,
    dims: [usize; 3],
    master_seed: u64,
    options: &RenderOptions,
) -> Result<Vec<PhantomSubject>, PhantomError> {
    if n_subjects == 0 {
        return Err(PhantomError::EmptyCohort);
    }
    (0..n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(i, dims, master_seed, options))
        .collect()
}
