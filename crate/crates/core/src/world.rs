//! Labelled Gaussian-mixture universes and the datasets drawn from them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::schedule::NoiseSchedule;
use crate::vecops::{log_sum_exp, sq_dist};
use crate::{Error, Result};

/// Class identifier. Known classes are always `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Named at training time; one of the `K` target classes.
    Known,
    /// Present, unlabelled, in the training pool but never named.
    Unknown,
    /// Appears only at test time.
    New,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Known => "known",
            Role::Unknown => "unknown",
            Role::New => "new",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub class: ClassId,
    /// Weight within its class; the weights of one class sum to 1.
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance.
    pub variance: f64,
}

/// A mixture component after forward noising to some timestep, with its weight normalised over
/// whatever set of classes was selected.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalComponent {
    pub class: ClassId,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl MarginalComponent {
    /// `log(weight · N(x; mean, variance·I))`
    pub fn log_weighted_density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        self.weight.ln()
            - 0.5 * d * (2.0 * std::f64::consts::PI * self.variance).ln()
            - 0.5 * sq_dist(x, &self.mean) / self.variance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub role: Role,
    /// Prior mass of the class in the world's unconditional density.
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWorld {
    dims: usize,
    classes: BTreeMap<ClassId, ClassInfo>,
    components: Vec<Component>,
    known_count: usize,
}

impl MixtureWorld {
    /// Validates and builds a world. `priors` defaults to uniform over the declared classes.
    pub fn new(
        dims: usize,
        components: Vec<Component>,
        roles: BTreeMap<ClassId, Role>,
        priors: Option<BTreeMap<ClassId, f64>>,
    ) -> Result<Self> {
        if dims == 0 {
            return Err(Error::InvalidWorld("dims: must be at least 1".into()));
        }
        if components.is_empty() {
            return Err(Error::InvalidWorld("components: at least one component required".into()));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dims {
                return Err(Error::InvalidWorld(format!(
                    "components[{i}].mean: expected {dims} entries, got {}",
                    c.mean.len()
                )));
            }
            if !(c.variance > 0.0 && c.variance.is_finite()) {
                return Err(Error::InvalidWorld(format!(
                    "components[{i}].variance: must be positive, got {}",
                    c.variance
                )));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidWorld(format!(
                    "components[{i}].weight: must be positive, got {}",
                    c.weight
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidWorld(format!("components[{i}].mean: non-finite entry")));
            }
            if !roles.contains_key(&c.class) {
                return Err(Error::InvalidWorld(format!(
                    "components[{i}].class: class {} has no declared role",
                    c.class
                )));
            }
        }
        for class in roles.keys() {
            let total: f64 = components.iter().filter(|c| c.class == *class).map(|c| c.weight).sum();
            if total == 0.0 {
                return Err(Error::InvalidWorld(format!("class {class}: declared without components")));
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidWorld(format!(
                    "components.weight: weights of class {class} sum to {total}, expected 1"
                )));
            }
        }
        let known: Vec<ClassId> =
            roles.iter().filter(|(_, r)| **r == Role::Known).map(|(c, _)| *c).collect();
        let known_count = known.len();
        if known_count == 0 {
            return Err(Error::InvalidWorld("roles: at least one known class required".into()));
        }
        let expected: Vec<ClassId> = (1..=known_count as u32).map(ClassId).collect();
        if known != expected {
            return Err(Error::InvalidWorld(format!(
                "roles: known classes must be exactly 1..={known_count}, got {known:?}"
            )));
        }

        let priors = match priors {
            Some(p) => {
                for (class, v) in &p {
                    if !roles.contains_key(class) {
                        return Err(Error::InvalidWorld(format!("priors: undeclared class {class}")));
                    }
                    if !(*v > 0.0 && v.is_finite()) {
                        return Err(Error::InvalidWorld(format!("priors: class {class} has prior {v}")));
                    }
                }
                if p.len() != roles.len() {
                    return Err(Error::InvalidWorld("priors: must cover every declared class".into()));
                }
                let total: f64 = p.values().sum();
                if (total - 1.0).abs() <= 1e-12 {
                    p
                } else {
                    p.into_iter().map(|(c, v)| (c, v / total)).collect::<BTreeMap<_, _>>()
                }
            }
            None => {
                let n = roles.len() as f64;
                roles.keys().map(|c| (*c, 1.0 / n)).collect()
            }
        };
        let classes = roles
            .into_iter()
            .map(|(c, role)| (c, ClassInfo { role, prior: priors[&c] }))
            .collect();
        Ok(Self { dims, classes, components, known_count })
    }

    /// A single isotropic Gaussian as a one-class world (class 1, known).
    pub fn single_gaussian(mean: Vec<f64>, variance: f64) -> Result<Self> {
        let dims = mean.len();
        let roles = BTreeMap::from([(ClassId(1), Role::Known)]);
        Self::new(dims, vec![Component { class: ClassId(1), weight: 1.0, mean, variance }], roles, None)
    }

    /// Default desk world: seven unit-variance classes evenly spaced on a circle of radius 6
    /// in the plane. Classes 1–2 are known, 3–5 unknown, 6–7 new; class `k` sits at angle
    /// `2π(k−1)/7`.
    pub fn desk() -> Self {
        Self::on_circle(6.0, 2, 3, 2, 1.0)
    }

    /// `known + unknown + new` unit-weight classes evenly spaced on a circle, in id order.
    pub fn on_circle(radius: f64, known: usize, unknown: usize, new: usize, variance: f64) -> Self {
        let total = known + unknown + new;
        let mut components = Vec::with_capacity(total);
        let mut roles = BTreeMap::new();
        for k in 0..total {
            let class = ClassId(k as u32 + 1);
            let angle = 2.0 * std::f64::consts::PI * k as f64 / total as f64;
            components.push(Component {
                class,
                weight: 1.0,
                mean: vec![radius * angle.cos(), radius * angle.sin()],
                variance,
            });
            let role = if k < known {
                Role::Known
            } else if k < known + unknown {
                Role::Unknown
            } else {
                Role::New
            };
            roles.insert(class, role);
        }
        Self::new(2, components, roles, None).expect("circle worlds are valid by construction")
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn known_count(&self) -> usize {
        self.known_count
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn classes(&self) -> impl Iterator<Item = (ClassId, &ClassInfo)> {
        self.classes.iter().map(|(c, i)| (*c, i))
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        (1..=self.known_count as u32).map(ClassId).collect()
    }

    pub fn role(&self, class: ClassId) -> Result<Role> {
        self.classes.get(&class).map(|i| i.role).ok_or(Error::UnknownClass(class))
    }

    pub fn prior(&self, class: ClassId) -> Result<f64> {
        self.classes.get(&class).map(|i| i.prior).ok_or(Error::UnknownClass(class))
    }

    pub fn classes_with_role(&self, role: Role) -> Vec<ClassId> {
        self.classes.iter().filter(|(_, i)| i.role == role).map(|(c, _)| *c).collect()
    }

    pub(crate) fn check_dims(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims {
            return Err(Error::DimensionMismatch { expected: self.dims, got: x.len() });
        }
        Ok(())
    }

    /// Mixture components under forward noising with cumulative `alpha`:
    /// means scale by `√α`, variances become `α·v + 1 − α`.
    pub fn marginal_at_alpha(&self, class_filter: Option<ClassId>, alpha: f64) -> Result<Vec<MarginalComponent>> {
        if let Some(c) = class_filter {
            if !self.classes.contains_key(&c) {
                return Err(Error::UnknownClass(c));
            }
        }
        let sa = alpha.sqrt();
        let mut out: Vec<MarginalComponent> = self
            .components
            .iter()
            .filter(|c| class_filter.is_none_or(|f| f == c.class))
            .map(|c| MarginalComponent {
                class: c.class,
                weight: c.weight * self.classes[&c.class].prior,
                mean: c.mean.iter().map(|m| sa * m).collect(),
                variance: alpha * c.variance + (1.0 - alpha),
            })
            .collect();
        let total: f64 = out.iter().map(|c| c.weight).sum();
        for c in &mut out {
            c.weight /= total;
        }
        Ok(out)
    }

    /// `log p(x, class)` for every declared class under the time-`alpha` marginal, in class-id order.
    pub fn class_log_joint(&self, x: &[f64], alpha: f64) -> Result<Vec<(ClassId, f64)>> {
        self.check_dims(x)?;
        let comps = self.marginal_at_alpha(None, alpha)?;
        Ok(self
            .classes
            .keys()
            .map(|class| {
                let terms: Vec<f64> = comps
                    .iter()
                    .filter(|c| c.class == *class)
                    .map(|c| c.log_weighted_density(x))
                    .collect();
                (*class, log_sum_exp(&terms))
            })
            .collect())
    }

    /// `log p(y | x)` under the data distribution, accurate for posteriors close to 1.
    pub fn log_class_posterior(&self, x: &[f64], y: ClassId) -> Result<f64> {
        let joint = self.class_log_joint(x, 1.0)?;
        let target = joint
            .iter()
            .find(|(c, _)| *c == y)
            .map(|(_, v)| *v)
            .ok_or(Error::UnknownClass(y))?;
        // −log(1 + Σ_{c≠y} e^{ℓ_c − ℓ_y}) keeps precision when the posterior is near 1
        let rest: f64 = joint.iter().filter(|(c, _)| *c != y).map(|(_, v)| (v - target).exp()).sum();
        if rest.is_finite() {
            Ok(-rest.ln_1p())
        } else {
            let all: Vec<f64> = joint.iter().map(|(_, v)| *v).collect();
            Ok(target - log_sum_exp(&all))
        }
    }

    /// Draws one exact sample from class `class`.
    pub fn sample_class<R: Rng + ?Sized>(&self, class: ClassId, rng: &mut R) -> Result<Vec<f64>> {
        let comps: Vec<&Component> = self.components.iter().filter(|c| c.class == class).collect();
        if comps.is_empty() {
            return Err(Error::UnknownClass(class));
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = comps[comps.len() - 1];
        for c in &comps {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let sd = chosen.variance.sqrt();
        Ok(chosen
            .mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }

    /// Picks a class of the given role proportionally to the class priors.
    pub fn sample_role_class<R: Rng + ?Sized>(&self, role: Role, rng: &mut R) -> Result<ClassId> {
        let candidates: Vec<(ClassId, f64)> = self
            .classes
            .iter()
            .filter(|(_, i)| i.role == role)
            .map(|(c, i)| (*c, i.prior))
            .collect();
        if candidates.is_empty() {
            return Err(Error::InvalidWorld(format!("no classes with role {}", role.as_str())));
        }
        let total: f64 = candidates.iter().map(|(_, p)| p).sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (c, p) in &candidates {
            acc += p;
            if u < acc {
                return Ok(*c);
            }
        }
        Ok(candidates[candidates.len() - 1].0)
    }

    pub fn to_file(&self) -> WorldFile {
        WorldFile {
            dims: self.dims,
            classes: self
                .classes
                .iter()
                .map(|(c, i)| ClassEntry { class: *c, role: i.role, prior: Some(i.prior) })
                .collect(),
            components: self
                .components
                .iter()
                .map(|c| ComponentEntry {
                    class: c.class,
                    weight: c.weight,
                    mean: c.mean.clone(),
                    variance: c.variance,
                })
                .collect(),
        }
    }

    pub fn from_file(file: WorldFile) -> Result<Self> {
        let mut roles = BTreeMap::new();
        let mut priors = BTreeMap::new();
        let mut any_prior = false;
        for (i, e) in file.classes.iter().enumerate() {
            if roles.insert(e.class, e.role).is_some() {
                return Err(Error::InvalidWorld(format!("classes[{i}].class: duplicate class {}", e.class)));
            }
            if let Some(p) = e.prior {
                any_prior = true;
                priors.insert(e.class, p);
            }
        }
        if any_prior && priors.len() != roles.len() {
            return Err(Error::InvalidWorld("classes[].prior: give a prior for every class or none".into()));
        }
        let components = file
            .components
            .into_iter()
            .map(|c| Component { class: c.class, weight: c.weight, mean: c.mean, variance: c.variance })
            .collect();
        Self::new(file.dims, components, roles, any_prior.then_some(priors))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: WorldFile = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidWorld(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_file())? + "\n")?;
        Ok(())
    }
}

/// On-disk world description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub dims: usize,
    pub classes: Vec<ClassEntry>,
    pub components: Vec<ComponentEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub class: ClassId,
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentEntry {
    pub class: ClassId,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub features: Vec<f64>,
    /// Ground truth; only evaluation code reads it.
    pub true_class: ClassId,
    pub role: Role,
}

/// Feature-only view of a training sample; what the trainer is allowed to see.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPoint {
    pub id: u64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_known_train: usize,
    pub mismatch_rho: f64,
    pub n_test_per_role: usize,
    pub rng_seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { n_known_train: 400, mismatch_rho: 0.6, n_test_per_role: 500, rng_seed: 0 }
    }
}

impl DatasetSpec {
    /// `round(n_known · ρ / (1 − ρ))`
    pub fn unknown_count(&self) -> usize {
        (self.n_known_train as f64 * self.mismatch_rho / (1.0 - self.mismatch_rho)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Dataset {
    pub fn train_view(&self) -> Vec<TrainPoint> {
        self.train.iter().map(|s| TrainPoint { id: s.id, features: s.features.clone() }).collect()
    }

    pub fn test_with_role(&self, role: Role) -> impl Iterator<Item = &LabeledSample> {
        self.test.iter().filter(move |s| s.role == role)
    }

    /// Writes `id,feature_0..feature_{d-1},role,true_class,split`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let dims = self.train.first().or(self.test.first()).map_or(0, |s| s.features.len());
        write!(out, "id")?;
        for i in 0..dims {
            write!(out, ",feature_{i}")?;
        }
        writeln!(out, ",role,true_class,split")?;
        for (split, rows) in [("train", &self.train), ("test", &self.test)] {
            for s in rows {
                write!(out, "{}", s.id)?;
                for v in &s.features {
                    write!(out, ",{v}")?;
                }
                writeln!(out, ",{},{},{split}", s.role.as_str(), s.true_class)?;
            }
        }
        Ok(())
    }
}

/// Draws the training pool and the test set.
///
/// The pool holds `n_known_train` known-role samples plus `round(n_known_train·ρ/(1−ρ))`
/// unknown-role samples, shuffled; the test set holds `n_test_per_role` samples of each role.
pub fn sample_dataset(world: &MixtureWorld, spec: &DatasetSpec) -> Result<Dataset> {
    if !(spec.mismatch_rho >= 0.0 && spec.mismatch_rho < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mismatch_rho must lie in [0, 1), got {}",
            spec.mismatch_rho
        )));
    }
    let n_unknown = spec.unknown_count();
    if n_unknown > 0 && world.classes_with_role(Role::Unknown).is_empty() {
        return Err(Error::InvalidWorld("mismatch_rho > 0 but no unknown classes declared".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut next_id = 0u64;
    let mut draw = |role: Role, rng: &mut ChaCha8Rng| -> Result<LabeledSample> {
        let class = world.sample_role_class(role, rng)?;
        let features = world.sample_class(class, rng)?;
        let id = next_id;
        next_id += 1;
        Ok(LabeledSample { id, features, true_class: class, role })
    };

    let mut train = Vec::with_capacity(spec.n_known_train + n_unknown);
    for _ in 0..spec.n_known_train {
        train.push(draw(Role::Known, &mut rng)?);
    }
    for _ in 0..n_unknown {
        train.push(draw(Role::Unknown, &mut rng)?);
    }
    train.shuffle(&mut rng);

    let mut test = Vec::with_capacity(3 * spec.n_test_per_role);
    for role in [Role::Known, Role::Unknown, Role::New] {
        if spec.n_test_per_role > 0 && world.classes_with_role(role).is_empty() {
            return Err(Error::InvalidWorld(format!("test set needs a class with role {}", role.as_str())));
        }
        for _ in 0..spec.n_test_per_role {
            test.push(draw(role, &mut rng)?);
        }
    }
    Ok(Dataset { train, test })
}

/// Exact class posterior `p(y | x)` under the data distribution, in class-id order.
pub fn bayes_class_posterior(world: &MixtureWorld, x: &[f64]) -> Result<Vec<(ClassId, f64)>> {
    let joint = world.class_log_joint(x, 1.0)?;
    let all: Vec<f64> = joint.iter().map(|(_, v)| *v).collect();
    let z = log_sum_exp(&all);
    Ok(joint.into_iter().map(|(c, v)| (c, (v - z).exp())).collect())
}

/// Time-`t` marginal of the world (or of one class, weights renormalised).
pub fn time_marginal(
    world: &MixtureWorld,
    class_filter: Option<ClassId>,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Vec<MarginalComponent>> {
    schedule.check_step(t)?;
    world.marginal_at_alpha(class_filter, schedule.alpha(t))
}
