//! Object worlds and episode sampling.
//!
//! The primary data source is a synthetic attribute world: each object type
//! is a set of attribute values, each value has a fixed base feature vector,
//! and an instance renders those vectors (plus noise) onto randomly chosen
//! slots of an otherwise-zero patch canvas. A binary feature-file mode
//! ingests precomputed patch grids instead.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seeds;
use crate::{Real, RealTensor};

pub const FEATURE_MAGIC: &[u8; 4] = b"EMFT";
pub const FEATURE_VERSION: u32 = 1;

/// An object type: a sorted set of distinct attribute value ids.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectType {
    values: Vec<usize>,
}

impl ObjectType {
    pub fn new(mut values: Vec<usize>) -> Result<Self> {
        values.sort_unstable();
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!(
                "object type with duplicate attribute values {values:?}"
            )));
        }
        if values.is_empty() {
            return Err(Error::Contract("object type with no attributes".into()));
        }
        Ok(ObjectType { values })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    /// Multi-hot over all attribute value ids; exactly K ones.
    pub fn binary_vector(&self, total_values: usize) -> Vec<Real> {
        let mut v = vec![0.0; total_values];
        for &id in &self.values {
            v[id] = 1.0;
        }
        v
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.values.iter().map(usize::to_string).collect();
        parts.join("+")
    }
}

/// One rendered object: a patch grid of feature vectors plus, per attribute
/// value, the patch indices it occupies.
#[derive(Debug, Clone)]
pub struct ObjectInstance {
    pub grid_h: usize,
    pub grid_w: usize,
    /// (grid_h * grid_w) x dim feature matrix.
    pub patches: RealTensor,
    /// Attribute value id -> occupied patch indices (disjoint across values).
    pub locations: Vec<(usize, Vec<usize>)>,
}

impl ObjectInstance {
    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone)]
pub struct WorldSplit {
    pub train_types: Vec<ObjectType>,
    pub eval_types: Vec<ObjectType>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSel {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub target_type: ObjectType,
    pub speaker_instance: ObjectInstance,
    pub candidates: Vec<ObjectInstance>,
    pub candidate_types: Vec<ObjectType>,
    pub target_index: usize,
}

/// How the attribute universe is enumerated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scheme {
    /// All K-subsets of N values (the 45-type world is K=2, N=10).
    Combination { n: usize, k: usize },
    /// Cartesian product over per-axis arities; value ids are offset per
    /// axis so they stay globally unique.
    Product { arities: Vec<usize> },
}

impl Scheme {
    pub fn total_values(&self) -> usize {
        match self {
            Scheme::Combination { n, .. } => *n,
            Scheme::Product { arities } => arities.iter().sum(),
        }
    }

    pub fn attributes_per_object(&self) -> usize {
        match self {
            Scheme::Combination { k, .. } => *k,
            Scheme::Product { arities } => arities.len(),
        }
    }

    pub fn universe(&self) -> Result<Vec<ObjectType>> {
        match self {
            Scheme::Combination { n, k } => {
                if *k == 0 || k > n {
                    return Err(Error::Config(format!(
                        "combination scheme needs 0 < k <= n, got k={k}, n={n}"
                    )));
                }
                let mut out = Vec::new();
                let mut comb: Vec<usize> = (0..*k).collect();
                loop {
                    out.push(ObjectType::new(comb.clone())?);
                    // Next lexicographic k-subset of 0..n.
                    let mut i = *k;
                    loop {
                        if i == 0 {
                            return Ok(out);
                        }
                        i -= 1;
                        if comb[i] + 1 <= n - (*k - i) {
                            comb[i] += 1;
                            for j in i + 1..*k {
                                comb[j] = comb[j - 1] + 1;
                            }
                            break;
                        }
                    }
                }
            }
            Scheme::Product { arities } => {
                if arities.is_empty() || arities.iter().any(|&a| a == 0) {
                    return Err(Error::Config(format!(
                        "product scheme needs nonempty positive arities, got {arities:?}"
                    )));
                }
                let mut out = vec![Vec::new()];
                let mut offset = 0;
                for &arity in arities {
                    let mut next = Vec::with_capacity(out.len() * arity);
                    for prefix in &out {
                        for v in 0..arity {
                            let mut vs = prefix.clone();
                            vs.push(offset + v);
                            next.push(vs);
                        }
                    }
                    out = next;
                    offset += arity;
                }
                out.into_iter().map(ObjectType::new).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorldKind {
    Synthetic,
    FeatureFile(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub scheme: Scheme,
    /// Patch slots on the synthetic canvas (1-D grid).
    pub patches: usize,
    /// Feature dimension per patch (synthetic mode).
    pub dim: usize,
    /// Per-component noise added to each placed base vector.
    pub sigma: Real,
    pub split_train: usize,
    pub split_eval: usize,
}

/// One loaded feature-file instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureInstance {
    pub class_ids: Vec<u32>,
    /// Per item: row0, col0, row1, col1 in patch coordinates, half-open.
    pub boxes: Vec<[u32; 4]>,
    /// grid_h * grid_w * dim, row-major.
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub items_per_image: usize,
    pub instances: Vec<FeatureInstance>,
}

impl FeatureDataset {
    pub fn patch_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Immutable world: universe, split, and everything needed to render
/// instances. Shareable across threads; sampling needs only an owned rng.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    universe: Vec<ObjectType>,
    split: WorldSplit,
    /// Synthetic mode: one base vector (length dim) per attribute value.
    base_vectors: Vec<Vec<Real>>,
    /// Feature mode: instance indices grouped by object type.
    features: Option<(FeatureDataset, BTreeMap<ObjectType, Vec<usize>>)>,
}

pub fn build_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    let universe = spec.scheme.universe()?;
    if spec.split_train + spec.split_eval != universe.len() {
        return Err(Error::Config(format!(
            "split {}/{} does not cover the {}-type universe",
            spec.split_train,
            spec.split_eval,
            universe.len()
        )));
    }
    if spec.split_train == 0 || spec.split_eval == 0 {
        return Err(Error::Config("both splits must be nonempty".into()));
    }

    let (base_vectors, features) = match &spec.kind {
        WorldKind::Synthetic => {
            if spec.patches < spec.scheme.attributes_per_object() {
                return Err(Error::Config(format!(
                    "{} patch slots cannot hold {} attributes",
                    spec.patches,
                    spec.scheme.attributes_per_object()
                )));
            }
            if spec.dim == 0 {
                return Err(Error::Config("feature dimension must be positive".into()));
            }
            let mut rng = seeds::rng(seed, "world/base", 0);
            let base = (0..spec.scheme.total_values())
                .map(|_| {
                    (0..spec.dim)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect()
                })
                .collect();
            (base, None)
        }
        WorldKind::FeatureFile(path) => {
            let ds = load_feature_file(path)?;
            let mut by_type: BTreeMap<ObjectType, Vec<usize>> = BTreeMap::new();
            for (i, inst) in ds.instances.iter().enumerate() {
                let ty =
                    ObjectType::new(inst.class_ids.iter().map(|&c| c as usize).collect())?;
                by_type.entry(ty).or_default().push(i);
            }
            let dataset_types: Vec<ObjectType> = by_type.keys().cloned().collect();
            if dataset_types != universe {
                return Err(Error::Config(format!(
                    "feature file covers {} object types, the declared scheme has {}",
                    dataset_types.len(),
                    universe.len()
                )));
            }
            (Vec::new(), Some((ds, by_type)))
        }
    };

    // Deterministic split: shuffle type indices, then cut.
    let mut order: Vec<usize> = (0..universe.len()).collect();
    let mut rng = seeds::rng(seed, "world/split", 0);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train_types: Vec<ObjectType> = order[..spec.split_train]
        .iter()
        .map(|&i| universe[i].clone())
        .collect();
    let eval_types: Vec<ObjectType> = order[spec.split_train..]
        .iter()
        .map(|&i| universe[i].clone())
        .collect();

    Ok(World {
        spec: spec.clone(),
        universe,
        split: WorldSplit {
            train_types,
            eval_types,
        },
        base_vectors,
        features,
    })
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn universe(&self) -> &[ObjectType] {
        &self.universe
    }

    pub fn split(&self) -> &WorldSplit {
        &self.split
    }

    pub fn types_of(&self, sel: SplitSel) -> &[ObjectType] {
        match sel {
            SplitSel::Train => &self.split.train_types,
            SplitSel::Eval => &self.split.eval_types,
        }
    }

    pub fn total_values(&self) -> usize {
        self.spec.scheme.total_values()
    }

    /// Attention positions per object (A).
    pub fn patch_count(&self) -> usize {
        match &self.features {
            Some((ds, _)) => ds.patch_count(),
            None => self.spec.patches,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match &self.features {
            Some((ds, _)) => ds.dim,
            None => self.spec.dim,
        }
    }

    pub fn render_instance(&self, ty: &ObjectType, rng: &mut ChaCha8Rng) -> Result<ObjectInstance> {
        if !self.universe.contains(ty) {
            return Err(Error::Lookup {
                kind: "object type",
                key: ty.label(),
            });
        }
        match &self.features {
            None => self.render_synthetic(ty, rng),
            Some((ds, by_type)) => {
                let indices = by_type.get(ty).ok_or_else(|| Error::Lookup {
                    kind: "feature instances for type",
                    key: ty.label(),
                })?;
                let inst = &ds.instances[indices[rng.gen_range(0..indices.len())]];
                Ok(feature_instance_to_object(ds, inst))
            }
        }
    }

    fn render_synthetic(&self, ty: &ObjectType, rng: &mut ChaCha8Rng) -> Result<ObjectInstance> {
        let p = self.spec.patches;
        let d = self.spec.dim;
        // Uniform ordered arrangement: draw each slot without replacement.
        let mut free: Vec<usize> = (0..p).collect();
        let mut slots = Vec::with_capacity(ty.values().len());
        for _ in ty.values() {
            let i = rng.gen_range(0..free.len());
            slots.push(free.swap_remove(i));
        }
        let mut data = vec![0.0; p * d];
        let mut locations = Vec::with_capacity(ty.values().len());
        for (&value, &slot) in ty.values().iter().zip(&slots) {
            let base = &self.base_vectors[value];
            for (out, &b) in data[slot * d..(slot + 1) * d].iter_mut().zip(base) {
                let noise: Real = StandardNormal.sample(rng);
                *out = b + self.spec.sigma * noise;
            }
            locations.push((value, vec![slot]));
        }
        Ok(ObjectInstance {
            grid_h: 1,
            grid_w: p,
            patches: RealTensor::matrix(p, d, data)?,
            locations,
        })
    }

    pub fn sample_episode(
        &self,
        sel: SplitSel,
        candidates: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode> {
        let types = self.types_of(sel);
        if candidates == 0 || candidates > types.len() {
            return Err(Error::Config(format!(
                "{candidates} candidates from a {}-type split",
                types.len()
            )));
        }
        // Partial Fisher-Yates: first `candidates` picks are a uniform
        // sample without replacement; pick 0 is the target type.
        let mut order: Vec<usize> = (0..types.len()).collect();
        for i in 0..candidates {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        let target_type = types[order[0]].clone();
        let target_index = rng.gen_range(0..candidates);
        let mut candidate_types: Vec<ObjectType> =
            (1..candidates).map(|i| types[order[i]].clone()).collect();
        candidate_types.insert(target_index, target_type.clone());

        let speaker_instance = self.render_instance(&target_type, rng)?;
        let candidate_instances = candidate_types
            .iter()
            .map(|ty| self.render_instance(ty, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            target_type,
            speaker_instance,
            candidates: candidate_instances,
            candidate_types,
            target_index,
        })
    }
}

fn feature_instance_to_object(ds: &FeatureDataset, inst: &FeatureInstance) -> ObjectInstance {
    let a = ds.patch_count();
    let data: Vec<Real> = inst.features.iter().map(|&f| Real::from(f)).collect();
    let mut locations = Vec::with_capacity(inst.class_ids.len());
    for (&class, bx) in inst.class_ids.iter().zip(&inst.boxes) {
        let mut patch_ids = Vec::new();
        for row in bx[0]..bx[2] {
            for col in bx[1]..bx[3] {
                patch_ids.push(row as usize * ds.grid_w + col as usize);
            }
        }
        locations.push((class as usize, patch_ids));
    }
    ObjectInstance {
        grid_h: ds.grid_h,
        grid_w: ds.grid_w,
        patches: RealTensor::matrix(a, ds.dim, data).expect("dataset invariant"),
        locations,
    }
}

pub fn load_feature_file(path: &Path) -> Result<FeatureDataset> {
    let mut r = crate::binio::Reader::open(path)?;
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            path: PathBuf::from(path),
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {FEATURE_MAGIC:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(r.fail(format!(
            "unsupported version {version}, expected {FEATURE_VERSION}"
        )));
    }
    let num_instances = r.u32("instance count")? as usize;
    let grid_h = r.u32("grid height")? as usize;
    let grid_w = r.u32("grid width")? as usize;
    let dim = r.u32("feature dimension")? as usize;
    let items = r.u32("items per image")? as usize;
    if grid_h == 0 || grid_w == 0 || dim == 0 || items == 0 {
        return Err(r.fail("zero grid, feature, or item dimension in header"));
    }
    let mut instances = Vec::with_capacity(num_instances);
    for idx in 0..num_instances {
        let mut class_ids = Vec::with_capacity(items);
        for _ in 0..items {
            class_ids.push(r.u32("item class id")?);
        }
        let mut boxes = Vec::with_capacity(items);
        for _ in 0..items {
            let bx = [
                r.u32("box row0")?,
                r.u32("box col0")?,
                r.u32("box row1")?,
                r.u32("box col1")?,
            ];
            if bx[0] >= bx[2] || bx[1] >= bx[3] || bx[2] as usize > grid_h || bx[3] as usize > grid_w
            {
                return Err(r.fail(format!(
                    "instance {idx}: box {bx:?} outside the {grid_h}x{grid_w} grid"
                )));
            }
            boxes.push(bx);
        }
        let mut features = Vec::with_capacity(grid_h * grid_w * dim);
        for _ in 0..grid_h * grid_w * dim {
            features.push(r.f32("feature data")?);
        }
        instances.push(FeatureInstance {
            class_ids,
            boxes,
            features,
        });
    }
    Ok(FeatureDataset {
        grid_h,
        grid_w,
        dim,
        items_per_image: items,
        instances,
    })
}

pub fn write_feature_file(path: &Path, ds: &FeatureDataset) -> Result<()> {
    for inst in &ds.instances {
        if inst.class_ids.len() != ds.items_per_image
            || inst.boxes.len() != ds.items_per_image
            || inst.features.len() != ds.grid_h * ds.grid_w * ds.dim
        {
            return Err(Error::Contract(
                "feature instance disagrees with dataset header".into(),
            ));
        }
    }
    let mut w = crate::binio::Writer::create(path)?;
    w.bytes(FEATURE_MAGIC)?;
    w.u32(FEATURE_VERSION)?;
    w.u32(ds.instances.len() as u32)?;
    w.u32(ds.grid_h as u32)?;
    w.u32(ds.grid_w as u32)?;
    w.u32(ds.dim as u32)?;
    w.u32(ds.items_per_image as u32)?;
    for inst in &ds.instances {
        for &c in &inst.class_ids {
            w.u32(c)?;
        }
        for bx in &inst.boxes {
            for &v in bx {
                w.u32(v)?;
            }
        }
        for &f in &inst.features {
            w.f32(f)?;
        }
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fashion_spec() -> WorldSpec {
        WorldSpec {
            kind: WorldKind::Synthetic,
            scheme: Scheme::Combination { n: 10, k: 2 },
            patches: 8,
            dim: 16,
            sigma: 0.1,
            split_train: 30,
            split_eval: 15,
        }
    }

    #[test]
    fn combination_universe_has_45_types() {
        let world = build_world(&fashion_spec(), 0).unwrap();
        assert_eq!(world.universe().len(), 45);
        assert_eq!(world.split().train_types.len(), 30);
        assert_eq!(world.split().eval_types.len(), 15);
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_universe() {
        for seed in 0..20 {
            let world = build_world(&fashion_spec(), seed).unwrap();
            let mut all: Vec<&ObjectType> = world
                .split()
                .train_types
                .iter()
                .chain(&world.split().eval_types)
                .collect();
            all.sort();
            all.dedup();
            assert_eq!(all.len(), 45, "seed {seed}");
        }
    }

    #[test]
    fn build_world_is_deterministic() {
        let a = build_world(&fashion_spec(), 42).unwrap();
        let b = build_world(&fashion_spec(), 42).unwrap();
        assert_eq!(a.split().train_types, b.split().train_types);
        assert_eq!(a.base_vectors, b.base_vectors);
        let c = build_world(&fashion_spec(), 43).unwrap();
        assert_ne!(a.split().train_types, c.split().train_types);
    }

    #[test]
    fn oversized_split_is_rejected() {
        let mut spec = fashion_spec();
        spec.split_train = 40;
        assert!(matches!(build_world(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn product_scheme_enumerates_the_cartesian_product() {
        let spec = WorldSpec {
            scheme: Scheme::Product {
                arities: vec![3, 4],
            },
            split_train: 8,
            split_eval: 4,
            ..fashion_spec()
        };
        let world = build_world(&spec, 0).unwrap();
        assert_eq!(world.universe().len(), 12);
        assert_eq!(world.total_values(), 7);
        // Axis offsets keep ids unique: first axis 0..3, second 3..7.
        for ty in world.universe() {
            assert!(ty.values()[0] < 3);
            assert!((3..7).contains(&ty.values()[1]));
        }
    }

    #[test]
    fn binary_vectors_have_k_ones() {
        let world = build_world(&fashion_spec(), 1).unwrap();
        for ty in world.universe() {
            let v = ty.binary_vector(world.total_values());
            assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 2);
            assert_eq!(v.len(), 10);
        }
    }

    #[test]
    fn noiseless_full_canvas_render_is_a_permutation_of_base_vectors() {
        let spec = WorldSpec {
            patches: 2,
            sigma: 0.0,
            ..fashion_spec()
        };
        let world = build_world(&spec, 5).unwrap();
        let ty = world.universe()[0].clone();
        let mut rng = seeds::rng(5, "test", 0);
        let inst = world.render_instance(&ty, &mut rng).unwrap();
        for (value, slots) in &inst.locations {
            let slot = slots[0];
            let got = &inst.patches.data()[slot * 16..(slot + 1) * 16];
            assert_eq!(got, world.base_vectors[*value].as_slice());
        }
        // Two values on two slots: every patch is occupied.
        let occupied: usize = inst.locations.iter().map(|(_, s)| s.len()).sum();
        assert_eq!(occupied, 2);
    }

    #[test]
    fn render_rejects_unknown_type() {
        let world = build_world(&fashion_spec(), 0).unwrap();
        let alien = ObjectType::new(vec![90, 91]).unwrap();
        let mut rng = seeds::rng(0, "test", 0);
        assert!(matches!(
            world.render_instance(&alien, &mut rng),
            Err(Error::Lookup { .. })
        ));
    }

    #[test]
    fn placement_collision_rate_matches_arrangement_count() {
        // Two renders of a K=2 type share placement with probability
        // 1/(P(P-1)).
        let spec = WorldSpec {
            patches: 4,
            ..fashion_spec()
        };
        let world = build_world(&spec, 9).unwrap();
        let ty = world.universe()[7].clone();
        let mut rng = seeds::rng(9, "test", 1);
        let slots = |inst: &ObjectInstance| -> Vec<usize> {
            inst.locations.iter().map(|(_, s)| s[0]).collect()
        };
        let mut collisions = 0;
        let trials = 20_000;
        for _ in 0..trials {
            let a = world.render_instance(&ty, &mut rng).unwrap();
            let b = world.render_instance(&ty, &mut rng).unwrap();
            if slots(&a) == slots(&b) {
                collisions += 1;
            }
        }
        let rate = f64::from(collisions) / f64::from(trials);
        let expect = 1.0 / 12.0;
        assert!((rate - expect).abs() < 0.02, "rate {rate}, expect {expect}");
    }

    #[test]
    fn episode_candidates_are_distinct_and_contain_the_target() {
        let world = build_world(&fashion_spec(), 3).unwrap();
        let mut rng = seeds::rng(3, "test", 2);
        for _ in 0..10_000 {
            let ep = world.sample_episode(SplitSel::Train, 15, &mut rng).unwrap();
            let mut tys = ep.candidate_types.clone();
            tys.sort();
            tys.dedup();
            assert_eq!(tys.len(), 15);
            assert_eq!(ep.candidate_types[ep.target_index], ep.target_type);
        }
    }

    #[test]
    fn episode_sampling_is_uniform() {
        let world = build_world(&fashion_spec(), 4).unwrap();
        let mut rng = seeds::rng(4, "test", 3);
        let mut type_counts: BTreeMap<ObjectType, usize> = BTreeMap::new();
        let mut pos_counts = vec![0usize; 15];
        let n = 10_000;
        for _ in 0..n {
            let ep = world.sample_episode(SplitSel::Eval, 15, &mut rng).unwrap();
            *type_counts.entry(ep.target_type.clone()).or_default() += 1;
            pos_counts[ep.target_index] += 1;
        }
        for ty in world.types_of(SplitSel::Eval) {
            let f = *type_counts.get(ty).unwrap_or(&0) as f64 / n as f64;
            assert!((f - 1.0 / 15.0).abs() < 0.02, "type {} freq {f}", ty.label());
        }
        for (i, &c) in pos_counts.iter().enumerate() {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 15.0).abs() < 0.02, "position {i} freq {f}");
        }
    }

    #[test]
    fn full_split_episode_uses_every_type() {
        let world = build_world(&fashion_spec(), 6).unwrap();
        let mut rng = seeds::rng(6, "test", 0);
        let ep = world.sample_episode(SplitSel::Eval, 15, &mut rng).unwrap();
        let mut tys = ep.candidate_types.clone();
        tys.sort();
        let mut expect = world.types_of(SplitSel::Eval).to_vec();
        expect.sort();
        assert_eq!(tys, expect);
    }

    #[test]
    fn speaker_and_target_instances_are_rendered_independently() {
        let world = build_world(&fashion_spec(), 8).unwrap();
        let mut rng = seeds::rng(8, "test", 4);
        let mut identical = 0;
        for _ in 0..100 {
            let ep = world.sample_episode(SplitSel::Train, 15, &mut rng).unwrap();
            if ep.speaker_instance.patches.data() == ep.candidates[ep.target_index].patches.data()
            {
                identical += 1;
            }
        }
        assert_eq!(identical, 0);
    }

    #[test]
    fn oversized_candidate_count_is_rejected() {
        let world = build_world(&fashion_spec(), 0).unwrap();
        let mut rng = seeds::rng(0, "test", 5);
        assert!(matches!(
            world.sample_episode(SplitSel::Eval, 16, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.emft");
        let ds = FeatureDataset {
            grid_h: 2,
            grid_w: 2,
            dim: 3,
            items_per_image: 1,
            instances: vec![FeatureInstance {
                class_ids: vec![4],
                boxes: vec![[0, 0, 1, 2]],
                features: (0..12).map(|i| i as f32 * 0.5).collect(),
            }],
        };
        write_feature_file(&path, &ds).unwrap();
        let back = load_feature_file(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.patch_count(), 4);
    }

    #[test]
    fn feature_file_bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.emft");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_feature_file(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn feature_file_out_of_grid_box_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oob.emft");
        let ds = FeatureDataset {
            grid_h: 2,
            grid_w: 2,
            dim: 1,
            items_per_image: 1,
            instances: vec![FeatureInstance {
                class_ids: vec![0],
                boxes: vec![[0, 0, 3, 1]],
                features: vec![0.0; 4],
            }],
        };
        write_feature_file(&path, &ds).unwrap();
        assert!(matches!(
            load_feature_file(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn full_scale_header_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.emft");
        let ds = FeatureDataset {
            grid_h: 7,
            grid_w: 7,
            dim: 768,
            items_per_image: 2,
            instances: vec![FeatureInstance {
                class_ids: vec![0, 1],
                boxes: vec![[0, 0, 3, 3], [4, 4, 7, 7]],
                features: vec![0.25; 49 * 768],
            }],
        };
        write_feature_file(&path, &ds).unwrap();
        let back = load_feature_file(&path).unwrap();
        assert_eq!(back.patch_count(), 49);
        assert_eq!(back.dim, 768);
    }

    #[test]
    fn feature_world_builds_and_renders() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.emft");
        // Three types over classes {0,1,2}: (0,1), (0,2), (1,2).
        let mk = |a: u32, b: u32, fill: f32| FeatureInstance {
            class_ids: vec![a, b],
            boxes: vec![[0, 0, 1, 1], [0, 1, 1, 2]],
            features: vec![fill; 2 * 2],
        };
        let ds = FeatureDataset {
            grid_h: 1,
            grid_w: 2,
            dim: 2,
            items_per_image: 2,
            instances: vec![mk(0, 1, 0.1), mk(0, 2, 0.2), mk(1, 2, 0.3)],
        };
        write_feature_file(&path, &ds).unwrap();
        let spec = WorldSpec {
            kind: WorldKind::FeatureFile(path),
            scheme: Scheme::Combination { n: 3, k: 2 },
            patches: 0,
            dim: 0,
            sigma: 0.0,
            split_train: 2,
            split_eval: 1,
        };
        let world = build_world(&spec, 11).unwrap();
        assert_eq!(world.universe().len(), 3);
        assert_eq!(world.patch_count(), 2);
        assert_eq!(world.feature_dim(), 2);
        let mut rng = seeds::rng(11, "test", 0);
        let ty = world.universe()[0].clone();
        let inst = world.render_instance(&ty, &mut rng).unwrap();
        assert_eq!(inst.locations.len(), 2);
        assert_eq!(inst.patches.shape(), &[2, 2]);
    }
}
