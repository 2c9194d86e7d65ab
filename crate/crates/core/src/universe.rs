//! Class vocabulary, personalized task sampling and train / ID / OOD splits.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    #[serde(default)]
    pub id: usize,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<usize>,
}

/// Validated class vocabulary with contiguous ids `0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct Vocabulary {
    classes: Vec<ClassEntry>,
}

impl TryFrom<Vec<ClassEntry>> for Vocabulary {
    type Error = Error;
    fn try_from(v: Vec<ClassEntry>) -> Result<Self> {
        Vocabulary::new(v)
    }
}

impl From<Vocabulary> for Vec<ClassEntry> {
    fn from(v: Vocabulary) -> Self {
        v.classes
    }
}

/// True when `name` occurs in `text` as a whole word, ignoring case.
fn contains_word(text: &str, name: &str) -> bool {
    let text = text.to_lowercase();
    let name = name.to_lowercase();
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    text.match_indices(&name).any(|(i, m)| {
        let before = text[..i].chars().next_back();
        let after = text[i + m.len()..].chars().next();
        !before.is_some_and(is_word) && !after.is_some_and(is_word)
    })
}

impl Vocabulary {
    /// Validates entries and reindexes them `0..len` in the order given.
    pub fn new(mut classes: Vec<ClassEntry>) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Vocabulary("vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for (i, c) in classes.iter_mut().enumerate() {
            c.name = c.name.trim().to_string();
            if c.name.is_empty() {
                return Err(Error::Vocabulary(format!("entry {i} has an empty name")));
            }
            if !seen.insert(c.name.clone()) {
                return Err(Error::Vocabulary(format!("duplicate class name `{}`", c.name)));
            }
            if let Some(d) = &c.description {
                if contains_word(d, &c.name) {
                    return Err(Error::Vocabulary(format!(
                        "description of `{}` mentions the class name",
                        c.name
                    )));
                }
            }
            c.id = i;
        }
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ClassEntry> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::Task(format!("unknown class id {id}")))
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Superclass id -> member class ids, or `None` if any class lacks one.
    pub fn superclass_groups(&self) -> Option<BTreeMap<usize, Vec<usize>>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for c in &self.classes {
            groups.entry(c.superclass?).or_default().push(c.id);
        }
        Some(groups)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VocabFile {
    Records(Vec<ClassEntry>),
    NameToDescription(BTreeMap<String, String>),
}

/// Parse a vocabulary from JSON text.
///
/// Accepts either an array of `{id, name, description, superclass}` records
/// (sorted by `id` before reindexing) or a `{name: description}` object.
pub fn parse_vocabulary(text: &str) -> Result<Vocabulary> {
    let file: VocabFile =
        serde_json::from_str(text).map_err(|e| Error::Vocabulary(e.to_string()))?;
    let entries = match file {
        VocabFile::Records(mut v) => {
            v.sort_by_key(|c| c.id);
            v
        }
        VocabFile::NameToDescription(m) => m
            .into_iter()
            .map(|(name, d)| ClassEntry {
                id: 0,
                name,
                description: Some(d),
                superclass: None,
            })
            .collect(),
    };
    Vocabulary::new(entries)
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vocabulary(&text)
}

pub fn save_vocabulary(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Name,
    Description,
    Image,
}

impl PromptMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::Name => "name",
            PromptMode::Description => "description",
            PromptMode::Image => "image",
        }
    }
}

/// An ordered class subset: classifier row `i` predicts `class_ids[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_ids: Vec<usize>,
    pub prompt_mode: PromptMode,
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, class_ids: Vec<usize>, prompt_mode: PromptMode) -> Result<Self> {
        let t = Self {
            task_id: task_id.into(),
            class_ids,
            prompt_mode,
        };
        t.validate(None)?;
        Ok(t)
    }

    pub fn validate(&self, max_classes: Option<usize>) -> Result<()> {
        if self.class_ids.is_empty() {
            return Err(Error::Task(format!("task {} has no classes", self.task_id)));
        }
        let set: BTreeSet<_> = self.class_ids.iter().collect();
        if set.len() != self.class_ids.len() {
            return Err(Error::Task(format!("task {} repeats a class", self.task_id)));
        }
        if let Some(m) = max_classes {
            if self.class_ids.len() > m {
                return Err(Error::Task(format!(
                    "task {} has {} classes, more than the maximum {m}",
                    self.task_id,
                    self.class_ids.len()
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Order-free identity of the task.
    pub fn class_set(&self) -> Vec<usize> {
        let mut v = self.class_ids.clone();
        v.sort_unstable();
        v
    }

    pub fn with_mode(mut self, mode: PromptMode) -> Self {
        self.prompt_mode = mode;
        self
    }

    /// Same task with classes reordered so that new position `i` holds old position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            task_id: self.task_id.clone(),
            class_ids: perm.iter().map(|&p| self.class_ids[p]).collect(),
            prompt_mode: self.prompt_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Uniform,
    SuperclassMix,
}

/// Superclass composition of a task, used by [`SamplingStrategy::SuperclassMix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Every class from a different superclass.
    DistinctSuperclasses,
    /// Some classes share a superclass; more than two superclasses overall.
    PartiallyShared,
    /// Classes drawn from exactly two superclasses.
    TwoSuperclasses,
}

pub fn task_kind(task: &TaskSpec, vocab: &Vocabulary) -> Result<TaskKind> {
    let mut sup = BTreeSet::new();
    for &id in &task.class_ids {
        let s = vocab
            .get(id)?
            .superclass
            .ok_or_else(|| Error::Task(format!("class {id} has no superclass")))?;
        sup.insert(s);
    }
    Ok(if sup.len() == task.class_ids.len() {
        TaskKind::DistinctSuperclasses
    } else if sup.len() == 2 {
        TaskKind::TwoSuperclasses
    } else {
        TaskKind::PartiallyShared
    })
}

pub fn task_id(prefix: &str, index: usize) -> String {
    format!("{prefix}-{index:05}")
}

/// Sample `count` ordered `c`-way tasks.
pub fn sample_tasks(
    vocab: &Vocabulary,
    count: usize,
    c: usize,
    strategy: SamplingStrategy,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    if c == 0 || c > vocab.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {c}-way tasks from {} classes",
            vocab.len()
        )));
    }
    let mut rng = rng::child_rng(seed, "sample_tasks", 0);
    let sets = match strategy {
        SamplingStrategy::Uniform => round_robin(vocab.len(), count, c, &mut rng),
        SamplingStrategy::SuperclassMix => superclass_mix(vocab, count, c, &mut rng)?,
    };
    Ok(sets
        .into_iter()
        .enumerate()
        .map(|(i, class_ids)| TaskSpec {
            task_id: task_id("task", i),
            class_ids,
            prompt_mode: PromptMode::Name,
        })
        .collect())
}

/// Draw classes from a reshuffled pool so each class appears about equally often.
fn round_robin(n: usize, count: usize, c: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut pool: VecDeque<usize> = VecDeque::new();
    let refill = |pool: &mut VecDeque<usize>, rng: &mut rng::Rng| {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        pool.extend(all);
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut chosen = Vec::with_capacity(c);
        let mut deferred = Vec::new();
        while chosen.len() < c {
            if pool.is_empty() {
                refill(&mut pool, rng);
            }
            let x = pool.pop_front().expect("refilled");
            if chosen.contains(&x) {
                deferred.push(x);
            } else {
                chosen.push(x);
            }
        }
        for x in deferred.into_iter().rev() {
            pool.push_front(x);
        }
        out.push(chosen);
    }
    out
}

fn superclass_mix(
    vocab: &Vocabulary,
    count: usize,
    c: usize,
    rng: &mut rng::Rng,
) -> Result<Vec<Vec<usize>>> {
    let groups = vocab.superclass_groups().ok_or_else(|| {
        Error::Sampling("superclass_mix needs a superclass for every class".into())
    })?;
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    let g = groups.len();
    let mut sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    if g < c {
        return Err(Error::Sampling(format!(
            "{g} superclasses cannot host {c} classes from distinct superclasses"
        )));
    }
    if c < 4 || g < 3 {
        return Err(Error::Sampling(
            "partially shared tasks need c >= 4 and at least three superclasses".into(),
        ));
    }
    if sizes[0] + sizes[1] < c {
        return Err(Error::Sampling(format!(
            "no two superclasses together hold {c} classes"
        )));
    }

    // 3:2:1 split; the remainder goes to the last kind.
    let n_distinct = count * 3 / 6;
    let n_partial = count * 2 / 6;
    let n_two = count - n_distinct - n_partial;

    let mut out = Vec::with_capacity(count);
    for _ in 0..n_distinct {
        out.push(draw_with_superclasses(&groups, c, c, rng));
    }
    for _ in 0..n_partial {
        let s = rng.random_range(3..c);
        out.push(draw_with_superclasses(&groups, c, s, rng));
    }
    for _ in 0..n_two {
        out.push(draw_with_superclasses(&groups, c, 2, rng));
    }
    out.shuffle(rng);
    Ok(out)
}

/// Draw `c` distinct classes spanning exactly `s` superclasses.
fn draw_with_superclasses(groups: &[Vec<usize>], c: usize, s: usize, rng: &mut rng::Rng) -> Vec<usize> {
    loop {
        let mut gidx: Vec<usize> = (0..groups.len()).collect();
        gidx.shuffle(rng);
        let picked = &gidx[..s];
        let capacity: usize = picked.iter().map(|&i| groups[i].len()).sum();
        if capacity < c {
            continue;
        }
        let mut chosen = Vec::with_capacity(c);
        let mut rest = Vec::new();
        for &gi in picked {
            let mut members = groups[gi].clone();
            members.shuffle(rng);
            chosen.push(members[0]);
            rest.extend_from_slice(&members[1..]);
        }
        rest.shuffle(rng);
        chosen.extend(rest.into_iter().take(c - s));
        chosen.shuffle(rng);
        return chosen;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train_tasks: Vec<TaskSpec>,
    pub id_test_tasks: Vec<TaskSpec>,
    pub ood_test_tasks: Vec<TaskSpec>,
}

impl TaskSplit {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

const ENUMERATION_LIMIT: f64 = 200_000.0;

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Draws task class-sets over `pool` that avoid `exclude`, distinct while supply lasts.
struct DisjointSetSampler<'a> {
    pool: &'a [usize],
    exclude: &'a HashSet<Vec<usize>>,
    enumerated: BTreeMap<usize, (Vec<Vec<usize>>, Vec<Vec<usize>>)>,
    used: HashSet<Vec<usize>>,
}

impl<'a> DisjointSetSampler<'a> {
    fn new(pool: &'a [usize], exclude: &'a HashSet<Vec<usize>>) -> Self {
        Self {
            pool,
            exclude,
            enumerated: BTreeMap::new(),
            used: HashSet::new(),
        }
    }

    fn draw(&mut self, c: usize, rng: &mut rng::Rng) -> Result<Vec<usize>> {
        let n = self.pool.len();
        if c > n {
            return Err(Error::Sampling(format!("{c} classes requested from a pool of {n}")));
        }
        let set = if binomial(n, c) <= ENUMERATION_LIMIT {
            let (avail, fresh) = self.enumerated.entry(c).or_insert_with(|| {
                let all: Vec<Vec<usize>> = combinations(n, c)
                    .into_iter()
                    .map(|idx| {
                        let mut s: Vec<usize> = idx.iter().map(|&i| self.pool[i]).collect();
                        s.sort_unstable();
                        s
                    })
                    .filter(|s| !self.exclude.contains(s))
                    .collect();
                (all.clone(), all)
            });
            if avail.is_empty() {
                return Err(Error::Sampling(format!(
                    "every {c}-class combination is already used by training tasks"
                )));
            }
            if fresh.is_empty() {
                *fresh = avail.clone();
            }
            let i = rng.random_range(0..fresh.len());
            fresh.swap_remove(i)
        } else {
            let mut found = None;
            for _ in 0..100_000 {
                let mut s: Vec<usize> = self.pool.choose_multiple(rng, c).copied().collect();
                s.sort_unstable();
                if !self.exclude.contains(&s) && !self.used.contains(&s) {
                    found = Some(s);
                    break;
                }
            }
            found.ok_or_else(|| Error::Sampling("could not find an unused class combination".into()))?
        };
        self.used.insert(set.clone());
        Ok(set)
    }
}

/// Build the train / ID / OOD split. ID tasks are the training tasks themselves
/// (scored on held-out images); OOD tasks are fresh combinations never trained on.
pub fn build_splits(
    vocab: &Vocabulary,
    tasks: Vec<TaskSpec>,
    ood_count: usize,
    seed: u64,
) -> Result<TaskSplit> {
    let train_sets: HashSet<Vec<usize>> = tasks.iter().map(TaskSpec::class_set).collect();
    let mut rng = rng::child_rng(seed, "build_splits", 0);
    let pool: Vec<usize> = (0..vocab.len()).collect();
    let mut sampler = DisjointSetSampler::new(&pool, &train_sets);
    let mode = tasks.first().map(|t| t.prompt_mode).unwrap_or(PromptMode::Name);
    let mut ood = Vec::with_capacity(ood_count);
    for i in 0..ood_count {
        let c = if tasks.is_empty() {
            return Err(Error::Sampling("cannot size OOD tasks without training tasks".into()));
        } else {
            tasks[rng.random_range(0..tasks.len())].num_classes()
        };
        let mut class_ids = sampler.draw(c, &mut rng)?;
        class_ids.shuffle(&mut rng);
        ood.push(TaskSpec {
            task_id: task_id("ood", i),
            class_ids,
            prompt_mode: mode,
        });
    }
    Ok(TaskSplit {
        id_test_tasks: tasks.clone(),
        train_tasks: tasks,
        ood_test_tasks: ood,
    })
}

/// Split the vocabulary into two equal shards, keeping similar classes apart.
///
/// Members of each superclass alternate between shards; every pair in
/// `separate` is then forced onto opposite shards.
pub fn split_shards(
    vocab: &Vocabulary,
    separate: &[(usize, usize)],
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = rng::child_rng(seed, "split_shards", 0);
    let n = vocab.len();
    let mut order: Vec<usize> = match vocab.superclass_groups() {
        Some(groups) => {
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(&mut rng);
            for g in &mut groups {
                g.shuffle(&mut rng);
            }
            groups.concat()
        }
        None => {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng);
            v
        }
    };
    let mut shard_of = vec![0u8; n];
    for (i, &id) in order.iter().enumerate() {
        shard_of[id] = (i % 2) as u8;
    }
    for &(a, b) in separate {
        if a >= n || b >= n || a == b {
            return Err(Error::InvalidArgument(format!("bad separation pair ({a}, {b})")));
        }
        if shard_of[a] == shard_of[b] {
            // Swap b with some class on the other shard not pinned by another pair.
            let pinned: HashSet<usize> = separate.iter().flat_map(|&(x, y)| [x, y]).collect();
            let swap = (0..n)
                .find(|&k| shard_of[k] != shard_of[b] && !pinned.contains(&k))
                .ok_or_else(|| Error::InvalidArgument("cannot satisfy separation pairs".into()))?;
            shard_of.swap(b, swap);
        }
    }
    order.sort_unstable();
    let a: Vec<usize> = order.iter().copied().filter(|&k| shard_of[k] == 0).collect();
    let b: Vec<usize> = order.iter().copied().filter(|&k| shard_of[k] == 1).collect();
    Ok((a, b))
}

/// Tasks with `round(fraction * c)` classes from `unseen` and the rest from `seen`.
///
/// Combinations drawn entirely from `seen` avoid `exclude` (the training sets).
pub fn tasks_with_unseen_fraction(
    seen: &[usize],
    unseen: &[usize],
    c: usize,
    fraction: f64,
    count: usize,
    exclude: &HashSet<Vec<usize>>,
    seed: u64,
) -> Result<Vec<TaskSpec>> {
    let k_f = fraction * c as f64;
    let k = k_f.round() as usize;
    if !(0.0..=1.0).contains(&fraction) || (k_f - k as f64).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "unseen fraction {fraction} is not realizable with {c} classes"
        )));
    }
    if k > unseen.len() || c - k > seen.len() {
        return Err(Error::InvalidArgument(format!(
            "shards of size {}/{} cannot host {k} unseen of {c}",
            seen.len(),
            unseen.len()
        )));
    }
    let mut rng = rng::child_rng(seed, "unseen_tasks", (fraction * 1000.0) as u64);
    let mut seen_sampler = DisjointSetSampler::new(seen, exclude);
    let none = HashSet::new();
    let mut unseen_sampler = DisjointSetSampler::new(unseen, &none);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut ids = Vec::with_capacity(c);
        if k < c {
            if k == 0 {
                ids.extend(seen_sampler.draw(c, &mut rng)?);
            } else {
                ids.extend(seen.choose_multiple(&mut rng, c - k).copied());
            }
        }
        if k > 0 {
            ids.extend(unseen_sampler.draw(k, &mut rng)?);
        }
        ids.shuffle(&mut rng);
        out.push(TaskSpec {
            task_id: task_id(&format!("unseen{}", (fraction * 100.0).round() as usize), i),
            class_ids: ids,
            prompt_mode: PromptMode::Name,
        });
    }
    Ok(out)
}

/// Prompt strings for a task, position `i` describing `class_ids[i]`.
pub fn render_prompt(task: &TaskSpec, vocab: &Vocabulary) -> Result<Vec<String>> {
    task.class_ids
        .iter()
        .map(|&id| {
            let entry = vocab.get(id)?;
            match task.prompt_mode {
                PromptMode::Name => Ok(entry.name.clone()),
                PromptMode::Description => entry.description.clone().ok_or_else(|| {
                    Error::MissingPromptInput {
                        what: "description",
                        class: entry.name.clone(),
                    }
                }),
                PromptMode::Image => Err(Error::Unsupported(
                    "image prompts have no text rendering".into(),
                )),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new(
            (0..n)
                .map(|i| ClassEntry {
                    id: i,
                    name: format!("class{i}"),
                    description: Some(format!("thing number {i}")),
                    superclass: Some(i / 5),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn loads_record_and_map_forms() {
        let v = parse_vocabulary(r#"[{"id": 5, "name": "b"}, {"id": 2, "name": "a"}]"#).unwrap();
        assert_eq!(v.get(0).unwrap().name, "a");
        assert_eq!(v.get(1).unwrap().id, 1);

        let v = parse_vocabulary(r#"{"boy": "a male child or young man"}"#).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.get(0).unwrap().name, "boy");
        assert_eq!(v.get(0).unwrap().description.as_deref(), Some("a male child or young man"));
    }

    #[test]
    fn loads_hundred_classes() {
        let recs: Vec<_> = (0..100)
            .map(|i| serde_json::json!({"id": i, "name": format!("c{i}")}))
            .collect();
        let v = parse_vocabulary(&serde_json::to_string(&recs).unwrap()).unwrap();
        assert_eq!(v.len(), 100);
        assert!(v.classes().iter().enumerate().all(|(i, c)| c.id == i));
    }

    #[test]
    fn rejects_duplicates_and_name_leaks() {
        assert!(parse_vocabulary(r#"[{"name": "apple"}, {"name": "apple"}]"#).is_err());
        assert!(parse_vocabulary(r#"{"apple": "an apple a day"}"#).is_err());
        // Substrings of other words are not leaks.
        assert!(parse_vocabulary(r#"{"ant": "an insect that is important"}"#).is_ok());
    }

    #[test]
    fn twelve_class_combination_count() {
        let n = binomial(100, 10);
        assert!((n / 1.73e13 - 1.0).abs() < 0.005, "{n}");
    }

    #[test]
    fn forced_full_task() {
        let v = vocab(10);
        let t = sample_tasks(&v, 1, 10, SamplingStrategy::Uniform, 3).unwrap();
        assert_eq!(t[0].class_set(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn too_many_classes_is_an_error() {
        assert!(sample_tasks(&vocab(4), 1, 5, SamplingStrategy::Uniform, 0).is_err());
    }

    #[test]
    fn superclass_mix_ratio() {
        let v = vocab(100);
        let tasks = sample_tasks(&v, 600, 10, SamplingStrategy::SuperclassMix, 1).unwrap();
        let mut counts = BTreeMap::new();
        for t in &tasks {
            assert_eq!(t.class_set().len(), 10);
            *counts.entry(format!("{:?}", task_kind(t, &v).unwrap())).or_insert(0) += 1;
        }
        assert_eq!(counts["DistinctSuperclasses"], 300);
        assert_eq!(counts["PartiallyShared"], 200);
        assert_eq!(counts["TwoSuperclasses"], 100);
    }

    #[test]
    fn superclass_mix_needs_annotations() {
        let v = parse_vocabulary(r#"[{"name":"a"},{"name":"b"},{"name":"c"},{"name":"d"}]"#).unwrap();
        assert!(sample_tasks(&v, 6, 4, SamplingStrategy::SuperclassMix, 0).is_err());
    }

    #[test]
    fn ood_is_combination_disjoint() {
        let v = vocab(12);
        let tasks = sample_tasks(&v, 200, 5, SamplingStrategy::Uniform, 4).unwrap();
        let split = build_splits(&v, tasks, 150, 4).unwrap();
        assert_eq!(split.ood_test_tasks.len(), 150);
        let train: HashSet<_> = split.train_tasks.iter().map(TaskSpec::class_set).collect();
        assert!(split.ood_test_tasks.iter().all(|t| !train.contains(&t.class_set())));
        let ood: HashSet<_> = split.ood_test_tasks.iter().map(TaskSpec::class_set).collect();
        assert_eq!(ood.len(), 150);
    }

    #[test]
    fn ood_impossible_when_every_combination_is_trained() {
        let v = vocab(5);
        let tasks = sample_tasks(&v, 1, 5, SamplingStrategy::Uniform, 0).unwrap();
        assert!(build_splits(&v, tasks.clone(), 1, 0).is_err());
        assert!(build_splits(&v, tasks, 0, 0).unwrap().ood_test_tasks.is_empty());
    }

    #[test]
    fn render_orders_and_errors() {
        let v = Vocabulary::new(vec![
            ClassEntry { id: 0, name: "zero".into(), description: None, superclass: None },
            ClassEntry { id: 0, name: "telephone".into(), description: Some("device for calls".into()), superclass: None },
            ClassEntry { id: 0, name: "rabbit".into(), description: None, superclass: None },
        ])
        .unwrap();
        let t = TaskSpec::new("t", vec![1, 2], PromptMode::Name).unwrap();
        assert_eq!(render_prompt(&t, &v).unwrap(), vec!["telephone", "rabbit"]);
        let p = t.permuted(&[1, 0]);
        assert_eq!(render_prompt(&p, &v).unwrap(), vec!["rabbit", "telephone"]);
        let d = t.with_mode(PromptMode::Description);
        assert!(matches!(render_prompt(&d, &v), Err(Error::MissingPromptInput { .. })));
    }

    #[test]
    fn shards_separate_pairs_and_superclasses() {
        let v = vocab(20);
        let (a, b) = split_shards(&v, &[(0, 1), (7, 8)], 9).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(b.len(), 10);
        assert_ne!(a.contains(&0), a.contains(&1));
        assert_ne!(a.contains(&7), a.contains(&8));
    }

    #[test]
    fn unseen_fraction_must_be_realizable() {
        let seen: Vec<usize> = (0..10).collect();
        let unseen: Vec<usize> = (10..20).collect();
        let none = HashSet::new();
        assert!(tasks_with_unseen_fraction(&seen, &unseen, 5, 0.3, 4, &none, 0).is_err());
        let t = tasks_with_unseen_fraction(&seen, &unseen, 5, 0.4, 20, &none, 0).unwrap();
        for task in t {
            assert_eq!(task.class_ids.iter().filter(|&&c| c >= 10).count(), 2);
        }
    }
}
