//! Interaction datasets, evaluation cohorts, leave-one-out splits, and
//! candidate sets.
//!
//! The canonical on-disk form is JSONL, one interaction per line:
//! `{"user_id":…,"item_id":…,"title":…,"category":…,"timestamp":…}`.
//! A `category` given as a list (Amazon-style category paths) is reduced to
//! its last non-empty element. MIND's `behaviors.tsv` / `news.tsv` pair can be
//! loaded directly or converted to JSONL.
//!
//! All sampling uses ChaCha8 streams. Candidate sets draw from a per-user
//! stream seeded by FNV-1a over the run seed and the user id, so adding users
//! never perturbs the candidates of existing ones.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::fnv1a64;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    pub category: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn item(&self) -> Item {
        Item {
            item_id: self.item_id.clone(),
            title: self.title.clone(),
            category: self.category.clone(),
        }
    }
}

/// One user's interactions, oldest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserHistory {
    /// Sorts by timestamp; equal timestamps keep their given order.
    pub fn new(user_id: impl Into<String>, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by_key(|i| i.timestamp);
        Self {
            user_id: user_id.into(),
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// The canonical JSONL record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub title: String,
    pub category: String,
    pub timestamp: i64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdField {
    Text(String),
    Number(serde_json::Number),
}

impl IdField {
    fn into_string(self) -> String {
        match self {
            IdField::Text(s) => s,
            IdField::Number(n) => n.to_string(),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CategoryField {
    Leaf(String),
    Path(Vec<String>),
}

impl CategoryField {
    fn leaf(self) -> String {
        match self {
            CategoryField::Leaf(s) => s,
            CategoryField::Path(parts) => parts
                .into_iter()
                .rev()
                .find(|p| !p.trim().is_empty())
                .unwrap_or_default(),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    user_id: IdField,
    item_id: IdField,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    category: Option<CategoryField>,
    timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records_read: usize,
    pub records_kept: usize,
    pub dropped_missing_fields: usize,
    /// MIND history or impression ids absent from the news file.
    pub unresolved_items: usize,
    /// 1-based line numbers that could not be parsed.
    pub unparseable_lines: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DataSource {
    Jsonl { path: PathBuf },
    MindTsv { behaviors: PathBuf, news: PathBuf },
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    /// Users in order of first appearance.
    pub users: IndexMap<String, UserHistory>,
    /// Every item seen, in order of first appearance.
    pub catalog: IndexMap<String, Item>,
    pub report: IngestReport,
}

impl Dataset {
    pub fn from_records(records: impl IntoIterator<Item = InteractionRecord>) -> Self {
        let mut builder = Builder::default();
        for r in records {
            builder.push(r);
        }
        builder.finish(IngestReport::default())
    }

    pub fn histories(&self) -> impl Iterator<Item = &UserHistory> + '_ {
        self.users.values()
    }

    pub fn items(&self) -> Vec<Item> {
        self.catalog.values().cloned().collect()
    }

    /// Writes canonical JSONL: users in dataset order, interactions oldest first.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for user in self.users.values() {
            for i in &user.interactions {
                let record = InteractionRecord {
                    user_id: user.user_id.clone(),
                    item_id: i.item_id.clone(),
                    title: i.title.clone(),
                    category: i.category.clone(),
                    timestamp: i.timestamp,
                };
                let line = serde_json::to_string(&record).expect("records serialize");
                writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
            }
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Default)]
struct Builder {
    users: IndexMap<String, Vec<Interaction>>,
    catalog: IndexMap<String, Item>,
    kept: usize,
}

impl Builder {
    fn push(&mut self, r: InteractionRecord) {
        let interaction = Interaction {
            item_id: r.item_id,
            title: r.title,
            category: r.category,
            timestamp: r.timestamp,
        };
        self.catalog
            .entry(interaction.item_id.clone())
            .or_insert_with(|| interaction.item());
        self.users.entry(r.user_id).or_default().push(interaction);
        self.kept += 1;
    }

    fn finish(self, mut report: IngestReport) -> Dataset {
        report.records_kept = self.kept;
        Dataset {
            users: self
                .users
                .into_iter()
                .map(|(id, interactions)| (id.clone(), UserHistory::new(id, interactions)))
                .collect(),
            catalog: self.catalog,
            report,
        }
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

pub fn load_interactions(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Jsonl { path } => load_jsonl(path),
        DataSource::MindTsv { behaviors, news } => load_mind(behaviors, news),
    }
}

fn load_jsonl(path: &Path) -> Result<Dataset> {
    let mut builder = Builder::default();
    let mut report = IngestReport::default();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        report.records_read += 1;
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!(
                    "{}:{line_no}: skipping unparseable record: {e}",
                    path.display()
                );
                report.unparseable_lines.push(line_no);
                continue;
            }
        };
        let title = raw.title.unwrap_or_default();
        let category = raw.category.map(CategoryField::leaf).unwrap_or_default();
        if title.trim().is_empty() || category.trim().is_empty() {
            report.dropped_missing_fields += 1;
            continue;
        }
        builder.push(InteractionRecord {
            user_id: raw.user_id.into_string(),
            item_id: raw.item_id.into_string(),
            title,
            category,
            timestamp: raw.timestamp,
        });
    }
    Ok(builder.finish(report))
}

/// Joins MIND click logs with the news catalogue.
///
/// A user's history is the click history of their first impression line,
/// followed by the items they clicked in their impressions (label `1`), in
/// file order, skipping items already present. Timestamps are sequence
/// indices. The news `category` column is used as the item category.
fn load_mind(behaviors: &Path, news: &Path) -> Result<Dataset> {
    let mut report = IngestReport::default();
    let mut catalog: IndexMap<String, Option<(String, String)>> = IndexMap::new();
    for (line_no, line) in open_lines(news)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            report.unparseable_lines.push(line_no);
            continue;
        }
        let (title, category) = (cols[3].trim(), cols[1].trim());
        let info = (!title.is_empty() && !category.is_empty())
            .then(|| (title.to_string(), category.to_string()));
        catalog.insert(cols[0].trim().to_string(), info);
    }

    let mut clicks: IndexMap<String, Vec<String>> = IndexMap::new();
    for (line_no, line) in open_lines(behaviors)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 5 {
            report.unparseable_lines.push(line_no);
            continue;
        }
        let user = cols[1].trim().to_string();
        let first_line = !clicks.contains_key(&user);
        let seq = clicks.entry(user).or_default();
        if first_line {
            seq.extend(cols[3].split_whitespace().map(str::to_string));
        }
        for imp in cols[4].split_whitespace() {
            if let Some(id) = imp.strip_suffix("-1") {
                if !seq.iter().any(|s| s == id) {
                    seq.push(id.to_string());
                }
            }
        }
    }

    let mut builder = Builder::default();
    for (user, ids) in clicks {
        let mut ts = 0i64;
        for id in ids {
            report.records_read += 1;
            match catalog.get(&id) {
                None => report.unresolved_items += 1,
                Some(None) => report.dropped_missing_fields += 1,
                Some(Some((title, category))) => {
                    builder.push(InteractionRecord {
                        user_id: user.clone(),
                        item_id: id,
                        title: title.clone(),
                        category: category.clone(),
                        timestamp: ts,
                    });
                    ts += 1;
                }
            }
        }
    }
    Ok(builder.finish(report))
}

/// Users with at least `min_interactions` interactions, uniformly sampled down
/// to `sample_size`. The result keeps dataset order.
pub fn select_cohort<'a>(
    users: impl IntoIterator<Item = &'a UserHistory>,
    min_interactions: usize,
    sample_size: usize,
    seed: u64,
) -> Vec<&'a UserHistory> {
    let eligible: Vec<&UserHistory> = users
        .into_iter()
        .filter(|u| u.len() >= min_interactions)
        .collect();
    if eligible.len() <= sample_size {
        return eligible;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, eligible.len(), sample_size).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| eligible[i]).collect()
}

/// Users with between `lo` and `hi` interactions, inclusive.
pub fn filter_cold_start<'a>(
    users: impl IntoIterator<Item = &'a UserHistory>,
    lo: usize,
    hi: usize,
) -> Vec<&'a UserHistory> {
    users
        .into_iter()
        .filter(|u| (lo..=hi).contains(&u.len()))
        .collect()
}

/// Splits off the temporally last interaction as the test item.
pub fn leave_one_out(history: &UserHistory) -> Result<(Vec<Interaction>, Interaction)> {
    if history.len() < 2 {
        return Err(Error::HistoryTooShort {
            user: history.user_id.clone(),
            len: history.len(),
        });
    }
    let mut train = history.interactions.clone();
    let test = train.pop().expect("length checked");
    Ok((train, test))
}

pub fn user_seed(seed: u64, user_id: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(user_id.as_bytes());
    fnv1a64(&bytes)
}

/// `m - 1` negatives the user never interacted with, plus the ground truth,
/// shuffled.
pub fn build_candidates(
    ground_truth: &Item,
    universe: &[Item],
    user_history: &[Interaction],
    m: usize,
    seed: u64,
) -> Result<Vec<Item>> {
    if m == 0 {
        return Err(Error::InvalidInput(
            "candidate set size must be positive".into(),
        ));
    }
    let seen: HashSet<&str> = user_history
        .iter()
        .map(|i| i.item_id.as_str())
        .chain(std::iter::once(ground_truth.item_id.as_str()))
        .collect();
    let mut pool: Vec<&Item> = Vec::new();
    let mut pool_ids: HashSet<&str> = HashSet::new();
    for item in universe {
        if !seen.contains(item.item_id.as_str()) && pool_ids.insert(item.item_id.as_str()) {
            pool.push(item);
        }
    }
    let needed = m - 1;
    if pool.len() < needed {
        return Err(Error::InsufficientUniverse {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<Item> = index::sample(&mut rng, pool.len(), needed)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect();
    candidates.push(ground_truth.clone());
    candidates.shuffle(&mut rng);
    Ok(candidates)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub user_id: String,
    pub train_history: Vec<Interaction>,
    pub ground_truth: Item,
    pub candidates: Vec<Item>,
}

impl EvalInstance {
    pub fn train_user(&self) -> UserHistory {
        UserHistory {
            user_id: self.user_id.clone(),
            interactions: self.train_history.clone(),
        }
    }
}

pub fn build_eval_instances<'a>(
    users: impl IntoIterator<Item = &'a UserHistory>,
    universe: &[Item],
    m: usize,
    seed: u64,
) -> Result<Vec<EvalInstance>> {
    users
        .into_iter()
        .map(|user| {
            let (train, test) = leave_one_out(user)?;
            let ground_truth = test.item();
            let candidates = build_candidates(
                &ground_truth,
                universe,
                &user.interactions,
                m,
                user_seed(seed, &user.user_id),
            )?;
            Ok(EvalInstance {
                user_id: user.user_id.clone(),
                train_history: train,
                ground_truth,
                candidates,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interaction(id: &str, ts: i64) -> Interaction {
        Interaction {
            item_id: id.into(),
            title: format!("Title {id}"),
            category: "Games".into(),
            timestamp: ts,
        }
    }

    fn user(id: &str, n: usize) -> UserHistory {
        UserHistory::new(
            id,
            (0..n)
                .map(|i| interaction(&format!("{id}-{i}"), i as i64))
                .collect(),
        )
    }

    fn universe(n: usize) -> Vec<Item> {
        (0..n)
            .map(|i| interaction(&format!("item{i}"), 0).item())
            .collect()
    }

    #[test]
    fn jsonl_sorts_by_timestamp_and_drops_incomplete_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"user_id":"u","item_id":"b","title":"B","category":"X","timestamp":20}"#, "\n",
                r#"{"user_id":"u","item_id":"a","title":"A","category":"X","timestamp":10}"#, "\n",
                "\n",
                r#"{"user_id":"u","item_id":"c","title":"C","category":["Root","Leaf"],"timestamp":30}"#, "\n",
                r#"{"user_id":"u","item_id":"d","title":"D","category":"","timestamp":40}"#, "\n",
                r#"{"user_id":7,"item_id":9,"title":"N","category":"Y","timestamp":1}"#, "\n",
                "not json\n",
            ),
        )
        .unwrap();
        let ds = load_interactions(&DataSource::Jsonl { path }).unwrap();
        let u = &ds.users["u"];
        let ids: Vec<_> = u.interactions.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert_eq!(u.interactions[2].category, "Leaf");
        assert_eq!(ds.users["7"].interactions[0].item_id, "9");
        assert_eq!(ds.report.dropped_missing_fields, 1);
        assert_eq!(ds.report.unparseable_lines, vec![7]);
        assert_eq!(ds.report.records_read, 6);
        assert_eq!(ds.report.records_kept, 4);
    }

    #[test]
    fn mind_join_resolves_titles_and_categories() {
        let dir = tempfile::tempdir().unwrap();
        let behaviors = dir.path().join("behaviors.tsv");
        let news = dir.path().join("news.tsv");
        std::fs::write(
            &behaviors,
            "1\tU1\t11/11/2019 9:05:58 AM\tN1 N2\tN3-1 N4-0\n",
        )
        .unwrap();
        std::fs::write(
            &news,
            "N1\tsports\tfootball_nfl\tBig Game Recap\tabs\turl\t[]\t[]\nN2\tnews\tnewsworld\tWorld Update\t\t\t\t\nN3\tsports\tgolf\tGolf Open\t\t\t\t\n",
        )
        .unwrap();
        let ds = load_interactions(&DataSource::MindTsv { behaviors, news }).unwrap();
        let got: Vec<(String, String, String, i64)> = ds.users["U1"]
            .interactions
            .iter()
            .map(|i| {
                (
                    i.item_id.clone(),
                    i.title.clone(),
                    i.category.clone(),
                    i.timestamp,
                )
            })
            .collect();
        assert_eq!(
            got,
            vec![
                ("N1".into(), "Big Game Recap".into(), "sports".into(), 0),
                ("N2".into(), "World Update".into(), "news".into(), 1),
                ("N3".into(), "Golf Open".into(), "sports".into(), 2),
            ]
        );
        assert_eq!(ds.report.unresolved_items, 0);
    }

    #[test]
    fn cohort_requires_more_than_ten_interactions() {
        let users = vec![user("a", 10), user("b", 11), user("c", 30)];
        let cohort = select_cohort(&users, 11, 300, 1);
        let ids: Vec<_> = cohort.iter().map(|u| u.user_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"]);
    }

    #[test]
    fn cohort_sampling_is_seeded() {
        let users: Vec<_> = (0..50).map(|i| user(&format!("u{i}"), 12)).collect();
        let a = select_cohort(&users, 11, 10, 42);
        let b = select_cohort(&users, 11, 10, 42);
        let c = select_cohort(&users, 11, 10, 43);
        assert_eq!(a.len(), 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cold_start_filter_keeps_two_and_three() {
        let users: Vec<_> = (1..=4).map(|n| user(&format!("u{n}"), n)).collect();
        let kept: Vec<_> = filter_cold_start(&users, 2, 3)
            .iter()
            .map(|u| u.len())
            .collect();
        assert_eq!(kept, vec![2, 3]);
        assert!(filter_cold_start(&[], 2, 3).is_empty());
    }

    #[test]
    fn leave_one_out_holds_out_the_last_item() {
        let h = user("u", 3);
        let (train, test) = leave_one_out(&h).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.item_id, "u-2");
        assert!(leave_one_out(&user("u", 1)).is_err());
    }

    #[test]
    fn leave_one_out_tie_goes_to_later_record() {
        let h = UserHistory::new("u", vec![interaction("first", 5), interaction("second", 5)]);
        let (train, test) = leave_one_out(&h).unwrap();
        assert_eq!(test.item_id, "second");
        assert_eq!(train[0].item_id, "first");
    }

    #[test]
    fn candidates_have_twenty_unique_items_with_ground_truth_once() {
        let h = user("u", 5);
        let gt = h.interactions[4].item();
        let cands = build_candidates(&gt, &universe(40), &h.interactions, 20, 9).unwrap();
        assert_eq!(cands.len(), 20);
        assert_eq!(cands.iter().filter(|c| c.item_id == gt.item_id).count(), 1);
        let unique: HashSet<_> = cands.iter().map(|c| &c.item_id).collect();
        assert_eq!(unique.len(), 20);
        assert_eq!(
            cands,
            build_candidates(&gt, &universe(40), &h.interactions, 20, 9).unwrap()
        );
    }

    #[test]
    fn candidate_universe_boundary() {
        let h = user("u", 3);
        let gt = h.interactions[2].item();
        let mut uni = universe(19);
        uni.extend(h.interactions.iter().map(Interaction::item));
        assert!(build_candidates(&gt, &uni, &h.interactions, 20, 1).is_ok());
        let short = universe(18);
        assert!(matches!(
            build_candidates(&gt, &short, &h.interactions, 20, 1),
            Err(Error::InsufficientUniverse {
                needed: 19,
                available: 18
            })
        ));
    }

    #[test]
    fn jsonl_write_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::from_records(vec![InteractionRecord {
            user_id: "u".into(),
            item_id: "i".into(),
            title: "T".into(),
            category: "C".into(),
            timestamp: 3,
        }]);
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        ds.write_jsonl(&a).unwrap();
        load_interactions(&DataSource::Jsonl { path: a.clone() })
            .unwrap()
            .write_jsonl(&b)
            .unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}
