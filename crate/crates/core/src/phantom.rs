//! Synthetic cross-modality phantoms: nested ellipsoids rendered with
//! per-label intensity tables, paired with a known deformation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ddf::{warp_label_nearest, DisplacementField};
use crate::error::{Error, Result};
use crate::registration::ControlGrid;
use crate::volume::{Grid, LabelMap, Volume};

/// Label of the inner (cavity) ellipsoid in the default anatomy.
pub const LVC: i16 = 1;
/// Label of the surrounding shell in the default anatomy.
pub const MYO: i16 = 2;

/// An axis-aligned ellipsoid painted with `label`. Later shapes overwrite earlier ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub label: i16,
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum::<f64>() <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub label: i16,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deformation {
    None,
    /// The anatomy moves by `vector` voxels; the ground-truth pull-back field is `-vector`.
    Translation { vector: [f64; 3] },
    /// Control nodes drawn uniformly in `[-amplitude, amplitude]`, trilinearly expanded.
    Smooth { amplitude: f64, control_spacing: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub shapes: Vec<Ellipsoid>,
    pub modality_a: Vec<Tissue>,
    pub modality_b: Vec<Tissue>,
    /// Additive Gaussian noise on top of the per-tissue spread.
    pub noise_std: f64,
    pub deformation: Deformation,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let c = [23.5; 3];
        Self {
            dims: [48; 3],
            shapes: vec![
                Ellipsoid { label: MYO, center: c, radii: [14.0, 12.0, 12.0] },
                Ellipsoid { label: LVC, center: c, radii: [10.0, 8.0, 8.0] },
            ],
            modality_a: vec![
                Tissue { label: 0, mean: 0.15, std: 0.03 },
                Tissue { label: LVC, mean: 0.85, std: 0.04 },
                Tissue { label: MYO, mean: 0.45, std: 0.04 },
            ],
            // Contrast inverted and reordered, like MR vs CT appearance.
            modality_b: vec![
                Tissue { label: 0, mean: 0.55, std: 0.05 },
                Tissue { label: LVC, mean: 0.20, std: 0.04 },
                Tissue { label: MYO, mean: 0.90, std: 0.05 },
            ],
            noise_std: 0.02,
            deformation: Deformation::None,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn grid(&self) -> Grid {
        Grid::unit(self.dims)
    }

    /// Label set: background plus every shape label, sorted.
    pub fn label_set(&self) -> Vec<i16> {
        let mut set: Vec<i16> = std::iter::once(0).chain(self.shapes.iter().map(|s| s.label)).collect();
        set.sort_unstable();
        set.dedup();
        set
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument("phantom dims must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("noise_std must be >= 0".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::InvalidArgument("phantom needs at least one shape".into()));
        }
        for s in &self.shapes {
            if s.label == 0 {
                return Err(Error::InvalidArgument("shape label 0 is reserved for background".into()));
            }
            for a in 0..3 {
                let r = s.radii[a];
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::InvalidArgument(format!("shape {} has non-positive radius", s.label)));
                }
                let hi = (self.dims[a] - 1) as f64;
                if s.center[a] - r < 0.0 || s.center[a] + r > hi {
                    return Err(Error::InvalidArgument(format!(
                        "shape {} extends outside the volume along axis {a}",
                        s.label
                    )));
                }
            }
        }
        let set = self.label_set();
        for (name, table) in [("modality_a", &self.modality_a), ("modality_b", &self.modality_b)] {
            for l in &set {
                match table.iter().find(|t| t.label == *l) {
                    Some(t) if t.std >= 0.0 && t.mean.is_finite() => {}
                    Some(_) => return Err(Error::InvalidArgument(format!("{name}: bad entry for label {l}"))),
                    None => return Err(Error::InvalidArgument(format!("{name}: no entry for label {l}"))),
                }
            }
        }
        match self.deformation {
            Deformation::Smooth { amplitude, control_spacing } => {
                if control_spacing == 0 {
                    return Err(Error::InvalidArgument("control_spacing must be positive".into()));
                }
                if !(amplitude >= 0.0) || amplitude >= control_spacing as f64 / 2.0 {
                    return Err(Error::InvalidArgument("smooth amplitude must lie in [0, control_spacing/2)".into()));
                }
            }
            Deformation::Translation { vector } if vector.iter().any(|v| !v.is_finite()) => {
                return Err(Error::InvalidArgument("translation must be finite".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Paints the shapes on the config's grid.
pub fn paint_labels(config: &PhantomConfig) -> Result<LabelMap> {
    config.validate()?;
    let grid = config.grid();
    let labels = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let p = [c[0] as f64, c[1] as f64, c[2] as f64];
            config.shapes.iter().rev().find(|s| s.contains(p)).map_or(0, |s| s.label)
        })
        .collect();
    LabelMap::with_label_set(grid, labels, config.label_set())
}

/// Intensities drawn per voxel as `N(mean_l, std_l) + N(0, noise_std)`.
pub fn render_intensities(labels: &LabelMap, table: &[Tissue], noise_std: f64, rng: &mut impl Rng) -> Result<Volume> {
    let mut lookup = Vec::with_capacity(labels.label_set.len());
    for l in &labels.label_set {
        let t = table
            .iter()
            .find(|t| t.label == *l)
            .ok_or_else(|| Error::InvalidArgument(format!("no intensity entry for label {l}")))?;
        lookup.push(*t);
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let data = labels
        .labels
        .iter()
        .map(|&l| {
            let t = lookup[labels.channel_of(l).expect("label in set")];
            let tissue = if t.std > 0.0 { t.std * unit.sample(rng) } else { 0.0 };
            let noise = if noise_std > 0.0 { noise_std * unit.sample(rng) } else { 0.0 };
            t.mean + tissue + noise
        })
        .collect();
    Volume::new(labels.grid, data)
}

/// Control nodes uniform in `[-amplitude, amplitude]`, expanded trilinearly,
/// so every component is bounded by `amplitude` and nodes are reproduced exactly.
pub fn random_smooth_field(dims: [usize; 3], amplitude: f64, control_spacing: usize, seed: u64) -> Result<DisplacementField> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidArgument("amplitude must be finite and >= 0".into()));
    }
    let cg = ControlGrid::new(Grid::unit(dims), control_spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = (0..cg.field_param_len())
        .map(|_| if amplitude > 0.0 { rng.gen_range(-amplitude..=amplitude) } else { 0.0 })
        .collect();
    Ok(cg.expand(&params))
}

/// Ground-truth pull-back field for a deformation.
pub fn deformation_field(grid: Grid, deformation: &Deformation, seed: u64) -> Result<DisplacementField> {
    match *deformation {
        Deformation::None => Ok(DisplacementField::zeros(grid)),
        Deformation::Translation { vector } => Ok(DisplacementField::constant(grid, vector.map(|v| -v))),
        Deformation::Smooth { amplitude, control_spacing } => {
            let mut f = random_smooth_field(grid.dims, amplitude, control_spacing, seed)?;
            f.grid = grid;
            Ok(f)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub image: Volume,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub atlas: Subject,
    pub target: Subject,
    /// Pull-back field: `target_label(x) = atlas_label(x + gt_ddf(x))` by nearest lookup.
    pub gt_ddf: DisplacementField,
}

// Independent streams derived from one seed.
const FIELD_STREAM: u64 = 0x5EED_F1E1D;
const ATLAS_STREAM: u64 = 1;
const TARGET_STREAM: u64 = 2;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Atlas in modality A, target in modality B, target anatomy deformed by the
/// configured deformation.
pub fn generate_pair(config: &PhantomConfig) -> Result<PhantomPair> {
    let atlas_label = paint_labels(config)?;
    let gt_ddf = deformation_field(config.grid(), &config.deformation, config.seed ^ FIELD_STREAM)?;
    let target_label = warp_label_nearest(&atlas_label, &gt_ddf)?;
    let atlas_img = render_intensities(&atlas_label, &config.modality_a, config.noise_std, &mut stream(config.seed, ATLAS_STREAM))?;
    let target_img =
        render_intensities(&target_label, &config.modality_b, config.noise_std, &mut stream(config.seed, TARGET_STREAM))?;
    Ok(PhantomPair {
        atlas: Subject { image: atlas_img, label: atlas_label },
        target: Subject { image: target_img, label: target_label },
        gt_ddf,
    })
}

/// Inter-subject anatomical variability for cohorts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub base: PhantomConfig,
    pub atlases: usize,
    pub targets: usize,
    /// Shared shift of all shape centers, uniform per axis in `[-center_jitter, center_jitter]` voxels.
    pub center_jitter: f64,
    /// Per-axis radius scale, uniform in `[1 - radius_jitter, 1 + radius_jitter]`, drawn per shape.
    pub radius_jitter: f64,
    /// Per-subject smooth deformation applied to the painted labels.
    pub warp_amplitude: f64,
    pub warp_spacing: usize,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            base: PhantomConfig::default(),
            atlases: 10,
            targets: 5,
            center_jitter: 2.0,
            radius_jitter: 0.12,
            warp_amplitude: 1.5,
            warp_spacing: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    /// Modality A.
    pub atlases: Vec<Subject>,
    /// Modality B.
    pub targets: Vec<Subject>,
}

/// Seed of subject `index` in a cohort; atlases come first, then targets.
pub fn subject_seed(cohort_seed: u64, index: usize) -> u64 {
    cohort_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// Renders one cohort subject; pure in `(config, index)`.
pub fn generate_subject(config: &CohortConfig, index: usize) -> Result<Subject> {
    let total = config.atlases + config.targets;
    if index >= total {
        return Err(Error::InvalidArgument(format!("subject {index} outside cohort of {total}")));
    }
    let seed = subject_seed(config.seed, index);
    let mut rng = stream(seed, 0);
    let mut anatomy = config.base.clone();
    anatomy.deformation = Deformation::None;
    let shift: Vec<f64> = (0..3)
        .map(|_| if config.center_jitter > 0.0 { rng.gen_range(-config.center_jitter..=config.center_jitter) } else { 0.0 })
        .collect();
    for s in &mut anatomy.shapes {
        for a in 0..3 {
            s.center[a] += shift[a];
            if config.radius_jitter > 0.0 {
                s.radii[a] *= rng.gen_range(1.0 - config.radius_jitter..=1.0 + config.radius_jitter);
            }
        }
    }
    let mut label = paint_labels(&anatomy)?;
    if config.warp_amplitude > 0.0 {
        let field = random_smooth_field(anatomy.dims, config.warp_amplitude, config.warp_spacing, seed ^ FIELD_STREAM)?;
        label = warp_label_nearest(&label, &field)?;
    }
    let table = if index < config.atlases { &anatomy.modality_a } else { &anatomy.modality_b };
    let image = render_intensities(&label, table, anatomy.noise_std, &mut stream(seed, ATLAS_STREAM))?;
    Ok(Subject { image, label })
}

pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    let mut subjects = (0..config.atlases + config.targets)
        .map(|i| generate_subject(config, i))
        .collect::<Result<Vec<_>>>()?;
    let targets = subjects.split_off(config.atlases);
    Ok(Cohort { atlases: subjects, targets })
}
