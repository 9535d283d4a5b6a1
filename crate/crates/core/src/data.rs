//! Datasets, cross-validation fold plans, and the synthetic generator.
//!
//! A dataset directory holds five tab-separated files:
//!
//! ```text
//! drugs.tsv         drug_id  smiles  inchi      (header row)
//! diseases.tsv      disease_id                  (header row)
//! associations.tsv  drug_id  disease_id         (no header)
//! drug_sim.tsv      square matrix in drugs.tsv order
//! disease_sim.tsv   square matrix in diseases.tsv order
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{cosine, dot, Matrix};

pub const DRUGS_FILE: &str = "drugs.tsv";
pub const DISEASES_FILE: &str = "diseases.tsv";
pub const ASSOCIATIONS_FILE: &str = "associations.tsv";
pub const DRUG_SIM_FILE: &str = "drug_sim.tsv";
pub const DISEASE_SIM_FILE: &str = "disease_sim.tsv";

const SYMMETRY_TOLERANCE: f64 = 1e-6;

/// Binary drug × disease association matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix(Matrix);

impl AssociationMatrix {
    pub fn zeros(drugs: usize, diseases: usize) -> Self {
        Self(Matrix::zeros(drugs, diseases))
    }

    pub fn from_pairs(drugs: usize, diseases: usize, pairs: &[(usize, usize)]) -> Self {
        let mut m = Self::zeros(drugs, diseases);
        for &(i, j) in pairs {
            m.set(i, j, true);
        }
        m
    }

    pub fn num_drugs(&self) -> usize {
        self.0.rows()
    }

    pub fn num_diseases(&self) -> usize {
        self.0.cols()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j) != 0.0
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.0.set(i, j, if value { 1.0 } else { 0.0 });
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn count_positives(&self) -> usize {
        self.0.values().iter().filter(|&&v| v != 0.0).count()
    }

    /// Positive pairs in row-major order.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        let cols = self.num_diseases();
        self.0
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(idx, _)| (idx / cols, idx % cols))
            .collect()
    }

    pub fn count_zeros(&self) -> usize {
        self.0.len() - self.count_positives()
    }
}

/// The two text encodings of one drug.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrugText {
    pub smiles: String,
    pub inchi: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub drug_ids: Vec<String>,
    pub disease_ids: Vec<String>,
    pub associations: AssociationMatrix,
    pub drug_sim: Matrix,
    pub disease_sim: Matrix,
    pub texts: Vec<DrugText>,
}

impl Dataset {
    /// Assembles a dataset and checks every invariant.
    pub fn new(
        drug_ids: Vec<String>,
        disease_ids: Vec<String>,
        associations: AssociationMatrix,
        drug_sim: Matrix,
        disease_sim: Matrix,
        texts: Vec<DrugText>,
    ) -> Result<Self> {
        let ds = Self {
            drug_ids,
            disease_ids,
            associations,
            drug_sim,
            disease_sim,
            texts,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn num_drugs(&self) -> usize {
        self.drug_ids.len()
    }

    pub fn num_diseases(&self) -> usize {
        self.disease_ids.len()
    }

    pub fn drug_index(&self, id: &str) -> Option<usize> {
        self.drug_ids.iter().position(|d| d == id)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.num_drugs(), self.num_diseases());
        if n == 0 || m == 0 {
            return Err(Error::Validation("dataset has no drugs or no diseases".into()));
        }
        check_unique(&self.drug_ids, "drug")?;
        check_unique(&self.disease_ids, "disease")?;
        if self.associations.as_matrix().shape() != (n, m) {
            return Err(Error::Dimension {
                op: "associations",
                left: self.associations.as_matrix().shape(),
                right: (n, m),
            });
        }
        if self.associations.count_positives() == 0 {
            return Err(Error::Validation("association matrix has no positive entries".into()));
        }
        validate_similarity(&self.drug_sim, n, "drug")?;
        validate_similarity(&self.disease_sim, m, "disease")?;
        if self.texts.len() != n {
            return Err(Error::Validation(format!(
                "{} text records for {n} drugs",
                self.texts.len()
            )));
        }
        for (id, t) in self.drug_ids.iter().zip(&self.texts) {
            if t.smiles.is_empty() || t.inchi.is_empty() {
                return Err(Error::Validation(format!("drug {id} has an empty SMILES or InChI")));
            }
        }
        Ok(())
    }
}

fn check_unique(ids: &[String], kind: &str) -> Result<()> {
    let mut seen = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if let Some(prev) = seen.insert(id.as_str(), i) {
            return Err(Error::Validation(format!(
                "duplicate {kind} id `{id}` at rows {prev} and {i}"
            )));
        }
    }
    Ok(())
}

fn validate_similarity(sim: &Matrix, n: usize, kind: &str) -> Result<()> {
    if sim.shape() != (n, n) {
        return Err(Error::Dimension {
            op: "similarity",
            left: sim.shape(),
            right: (n, n),
        });
    }
    for i in 0..n {
        if (sim.get(i, i) - 1.0).abs() > SYMMETRY_TOLERANCE {
            return Err(Error::Validation(format!(
                "{kind} similarity diagonal [{i}][{i}] = {} (expected 1)",
                sim.get(i, i)
            )));
        }
        for j in 0..n {
            let v = sim.get(i, j);
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{kind} similarity [{i}][{j}] = {v} outside [0, 1]"
                )));
            }
            if (v - sim.get(j, i)).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::Validation(format!(
                    "{kind} similarity is not symmetric at ({i}, {j}): {v} vs {}",
                    sim.get(j, i)
                )));
            }
        }
    }
    Ok(())
}

fn tsv_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(has_headers)
        .quoting(false)
        .flexible(true)
        .from_reader(file))
}

fn parse_err(file: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        message: message.into(),
    }
}

fn read_records(path: &Path, file: &str, has_headers: bool, min_cols: usize) -> Result<Vec<Vec<String>>> {
    let mut reader = tsv_reader(path, has_headers)?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(file, e.to_string()))?;
        if rec.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() < min_cols {
            return Err(parse_err(
                file,
                format!("record {} has {} columns, expected {min_cols}", line + 1, rec.len()),
            ));
        }
        rows.push(rec.iter().map(|f| f.trim().to_string()).collect());
    }
    Ok(rows)
}

fn read_square(path: &Path, file: &str, n: usize) -> Result<Matrix> {
    let rows = read_records(path, file, false, 1)?;
    if rows.len() != n {
        return Err(parse_err(file, format!("{} rows, expected {n}", rows.len())));
    }
    let mut values = Vec::with_capacity(n * n);
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(parse_err(file, format!("row {r} has {} columns, expected {n}", row.len())));
        }
        for field in row {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(file, format!("row {r}: `{field}` is not a number")))?;
            values.push(v);
        }
    }
    Matrix::from_vec(n, n, values).map_err(|e| parse_err(file, e.to_string()))
}

/// Loads and validates a dataset directory. Row and column order follow the
/// order of `drugs.tsv` and `diseases.tsv`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let drugs = read_records(&dir.join(DRUGS_FILE), DRUGS_FILE, true, 3)?;
    let diseases = read_records(&dir.join(DISEASES_FILE), DISEASES_FILE, true, 1)?;

    let drug_ids: Vec<String> = drugs.iter().map(|r| r[0].clone()).collect();
    let texts: Vec<DrugText> = drugs
        .iter()
        .map(|r| DrugText {
            smiles: r[1].clone(),
            inchi: r[2].clone(),
        })
        .collect();
    let disease_ids: Vec<String> = diseases.iter().map(|r| r[0].clone()).collect();
    check_unique(&drug_ids, "drug")?;
    check_unique(&disease_ids, "disease")?;

    let drug_pos: HashMap<&str, usize> = drug_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();
    let disease_pos: HashMap<&str, usize> =
        disease_ids.iter().enumerate().map(|(i, d)| (d.as_str(), i)).collect();

    let mut associations = AssociationMatrix::zeros(drug_ids.len().max(1), disease_ids.len().max(1));
    for rec in read_records(&dir.join(ASSOCIATIONS_FILE), ASSOCIATIONS_FILE, false, 2)? {
        let i = *drug_pos.get(rec[0].as_str()).ok_or_else(|| Error::Referential {
            kind: "drug",
            id: rec[0].clone(),
            file: ASSOCIATIONS_FILE.into(),
        })?;
        let j = *disease_pos.get(rec[1].as_str()).ok_or_else(|| Error::Referential {
            kind: "disease",
            id: rec[1].clone(),
            file: ASSOCIATIONS_FILE.into(),
        })?;
        associations.set(i, j, true);
    }

    let drug_sim = read_square(&dir.join(DRUG_SIM_FILE), DRUG_SIM_FILE, drug_ids.len())?;
    let disease_sim = read_square(&dir.join(DISEASE_SIM_FILE), DISEASE_SIM_FILE, disease_ids.len())?;

    Dataset::new(drug_ids, disease_ids, associations, drug_sim, disease_sim, texts)
}

fn write_square(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::with_capacity(m.len() * 20);
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join("\t"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes the directory layout read by [`load_dataset`]. Floats use Rust's
/// shortest round-trip formatting, so a reload is bit-identical.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut drugs = String::from("drug_id\tsmiles\tinchi\n");
    for (id, t) in ds.drug_ids.iter().zip(&ds.texts) {
        drugs.push_str(&format!("{id}\t{}\t{}\n", t.smiles, t.inchi));
    }
    fs::write(dir.join(DRUGS_FILE), drugs)?;

    let mut diseases = String::from("disease_id\n");
    for id in &ds.disease_ids {
        diseases.push_str(id);
        diseases.push('\n');
    }
    fs::write(dir.join(DISEASES_FILE), diseases)?;

    let mut assoc = String::new();
    for (i, j) in ds.associations.positives() {
        assoc.push_str(&format!("{}\t{}\n", ds.drug_ids[i], ds.disease_ids[j]));
    }
    fs::write(dir.join(ASSOCIATIONS_FILE), assoc)?;

    write_square(&dir.join(DRUG_SIM_FILE), &ds.drug_sim)?;
    write_square(&dir.join(DISEASE_SIM_FILE), &ds.disease_sim)?;
    Ok(())
}

/// Assignment of every positive pair to one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub num_folds: usize,
    /// Positive pairs in row-major order.
    pub pairs: Vec<(usize, usize)>,
    /// `assignments[p]` is the fold of `pairs[p]`.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_positives(&self, fold: usize) -> Vec<(usize, usize)> {
        self.pairs
            .iter()
            .zip(&self.assignments)
            .filter(|(_, &f)| f == fold)
            .map(|(&p, _)| p)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.num_folds {
            Err(Error::Index {
                index: fold,
                len: self.num_folds,
            })
        } else {
            Ok(())
        }
    }
}

/// Shuffles the positive pairs with `seed` and deals them round-robin into
/// `num_folds` folds, so fold sizes differ by at most one.
pub fn split_folds(dataset: &Dataset, num_folds: usize, seed: u64) -> Result<FoldPlan> {
    let pairs = dataset.associations.positives();
    if num_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {num_folds}")));
    }
    if pairs.len() < num_folds {
        return Err(Error::Config(format!(
            "{} positives cannot fill {num_folds} folds",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; pairs.len()];
    for (slot, &p) in order.iter().enumerate() {
        assignments[p] = slot % num_folds;
    }
    Ok(FoldPlan {
        seed,
        num_folds,
        pairs,
        assignments,
    })
}

/// Copy of the association matrix with the held-out fold's positives zeroed.
pub fn make_train_matrix(dataset: &Dataset, plan: &FoldPlan, fold: usize) -> Result<AssociationMatrix> {
    plan.check_fold(fold)?;
    let mut m = dataset.associations.clone();
    for (i, j) in plan.fold_positives(fold) {
        m.set(i, j, false);
    }
    Ok(m)
}

/// Test pairs of one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalSet {
    pub fold: usize,
    /// `(drug, disease, label)` in row-major order.
    pub pairs: Vec<(usize, usize, u8)>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.pairs.iter().map(|p| p.2).collect()
    }
}

/// The fold's held-out positives plus every unknown pair of the full matrix.
pub fn make_eval_set(dataset: &Dataset, plan: &FoldPlan, fold: usize) -> Result<EvalSet> {
    plan.check_fold(fold)?;
    let r = &dataset.associations;
    let mut held_out = AssociationMatrix::zeros(r.num_drugs(), r.num_diseases());
    for (i, j) in plan.fold_positives(fold) {
        held_out.set(i, j, true);
    }
    let mut pairs = Vec::with_capacity(r.count_zeros() + plan.pairs.len() / plan.num_folds + 1);
    for i in 0..r.num_drugs() {
        for j in 0..r.num_diseases() {
            if held_out.get(i, j) {
                pairs.push((i, j, 1));
            } else if !r.get(i, j) {
                pairs.push((i, j, 0));
            }
        }
    }
    Ok(EvalSet { fold, pairs })
}

/// Planted structure behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub drug_latents: Matrix,
    pub disease_latents: Matrix,
    pub drug_clusters: Vec<usize>,
}

impl GroundTruth {
    pub fn score(&self, drug: usize, disease: usize) -> f64 {
        dot(self.drug_latents.row(drug), self.disease_latents.row(disease))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Generator settings. The first five fields are the public knobs; the rest
/// shape the planted clusters and strings.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_drugs: usize,
    pub num_diseases: usize,
    pub density: f64,
    pub latent_dim: usize,
    pub seed: u64,
    pub num_clusters: usize,
    /// Standard deviation of a drug's latent around its cluster centre.
    pub cluster_spread: f64,
    pub motifs_per_cluster: usize,
    /// Probability that a string motif is drawn from the drug's own cluster.
    pub motif_affinity: f64,
}

impl SynthConfig {
    pub fn new(num_drugs: usize, num_diseases: usize, density: f64, latent_dim: usize, seed: u64) -> Self {
        Self {
            num_drugs,
            num_diseases,
            density,
            latent_dim,
            seed,
            num_clusters: 5,
            cluster_spread: 0.5,
            motifs_per_cluster: 6,
            motif_affinity: 0.85,
        }
    }
}

const SMILES_ALPHABET: &[&str] = &[
    "C", "c", "N", "n", "O", "o", "S", "F", "Cl", "Br", "(", ")", "=", "1", "2", "3", "#", "[", "]", "H", "+", "-",
    "@",
];
const INCHI_ALPHABET: &[&str] = &[
    "C", "H", "N", "O", "S", "1", "2", "3", "4", "5", "6", "7", "8", "9", "/", "-", ",", "(", ")", "c", "h", "m",
    "t", "b", "+",
];

fn make_motifs(rng: &mut ChaCha8Rng, alphabet: &[&str], clusters: usize, per_cluster: usize) -> Vec<Vec<String>> {
    (0..clusters)
        .map(|_| {
            (0..per_cluster)
                .map(|_| {
                    let len = rng.random_range(3..=6);
                    (0..len)
                        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                        .collect::<String>()
                })
                .collect()
        })
        .collect()
}

fn motif_string(rng: &mut ChaCha8Rng, motifs: &[Vec<String>], cluster: usize, affinity: f64) -> String {
    let count = rng.random_range(5..=9);
    let mut s = String::new();
    for _ in 0..count {
        let source = if rng.random::<f64>() < affinity {
            cluster
        } else {
            rng.random_range(0..motifs.len())
        };
        let set = &motifs[source];
        s.push_str(&set[rng.random_range(0..set.len())]);
    }
    s
}

fn cosine_similarity_matrix(latents: &Matrix) -> Matrix {
    let n = latents.rows();
    let mut sim = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = ((1.0 + cosine(latents.row(i), latents.row(j))) / 2.0).clamp(0.0, 1.0);
            sim.set(i, j, v);
            sim.set(j, i, v);
        }
    }
    sim
}

impl SynthConfig {
    pub fn generate(&self) -> Result<Synthetic> {
        let (n, m) = (self.num_drugs, self.num_diseases);
        if !(self.density > 0.0 && self.density < 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1)", self.density)));
        }
        if n < 2 || m < 1 || self.latent_dim < 1 || self.num_clusters < 1 {
            return Err(Error::Config("synthetic dataset needs ≥2 drugs, ≥1 disease, latent_dim ≥ 1".into()));
        }
        let expected = self.density * (n * m) as f64;
        if expected < 10.0 {
            return Err(Error::Config(format!(
                "density {} yields {expected:.2} positives for {n}×{m}; need at least 10",
                self.density
            )));
        }
        let num_pos = expected.round() as usize;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dim = self.latent_dim;
        let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

        let centres: Vec<Vec<f64>> = (0..self.num_clusters)
            .map(|_| (0..dim).map(|_| normal(&mut rng)).collect())
            .collect();
        let drug_clusters: Vec<usize> = (0..n).map(|i| i % self.num_clusters).collect();
        let mut drug_latents = Matrix::zeros(n, dim);
        for i in 0..n {
            for d in 0..dim {
                let v = centres[drug_clusters[i]][d] + self.cluster_spread * normal(&mut rng);
                drug_latents.set(i, d, v);
            }
        }
        let mut disease_latents = Matrix::zeros(m, dim);
        for j in 0..m {
            for d in 0..dim {
                disease_latents.set(j, d, normal(&mut rng));
            }
        }

        // Top `num_pos` inner products; ties go to the smaller (drug, disease).
        let mut scored: Vec<(f64, usize, usize)> = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .map(|(i, j)| (dot(drug_latents.row(i), disease_latents.row(j)), i, j))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let positives: Vec<(usize, usize)> = scored[..num_pos].iter().map(|&(_, i, j)| (i, j)).collect();
        let associations = AssociationMatrix::from_pairs(n, m, &positives);

        let smiles_motifs = make_motifs(&mut rng, SMILES_ALPHABET, self.num_clusters, self.motifs_per_cluster);
        let inchi_motifs = make_motifs(&mut rng, INCHI_ALPHABET, self.num_clusters, self.motifs_per_cluster);
        let texts = drug_clusters
            .iter()
            .map(|&c| DrugText {
                smiles: motif_string(&mut rng, &smiles_motifs, c, self.motif_affinity),
                inchi: format!("InChI=1S/{}", motif_string(&mut rng, &inchi_motifs, c, self.motif_affinity)),
            })
            .collect();

        let dataset = Dataset::new(
            (0..n).map(|i| format!("SD{i:05}")).collect(),
            (0..m).map(|j| format!("SX{j:05}")).collect(),
            associations,
            cosine_similarity_matrix(&drug_latents),
            cosine_similarity_matrix(&disease_latents),
            texts,
        )?;
        Ok(Synthetic {
            dataset,
            truth: GroundTruth {
                drug_latents,
                disease_latents,
                drug_clusters,
            },
        })
    }
}

/// Clustered synthetic dataset with planted latent factors.
pub fn synth_generate(
    num_drugs: usize,
    num_diseases: usize,
    density: f64,
    latent_dim: usize,
    seed: u64,
) -> Result<Synthetic> {
    SynthConfig::new(num_drugs, num_diseases, density, latent_dim, seed).generate()
}
