//! Interaction logs, k-core filtering, per-user chronological sequences with
//! leave-one-out splits, and a synthetic Markov-chain generator.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

pub const PAD_ID: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }
}

/// Parse `user \t item \t timestamp` lines; blank lines and lines starting
/// with `#` are skipped.
pub fn parse_interactions<R: BufRead>(source: R) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty user or item id".into(),
            });
        }
        let timestamp = fields[2].trim().parse::<i64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("bad timestamp `{}`: {e}", fields[2]),
        })?;
        out.push(Interaction::new(fields[0], fields[1], timestamp));
    }
    Ok(out)
}

pub fn write_interactions<W: Write>(mut sink: W, interactions: &[Interaction]) -> std::io::Result<()> {
    for it in interactions {
        writeln!(sink, "{}\t{}\t{}", it.user, it.item, it.timestamp)?;
    }
    Ok(())
}

/// Keep the maximal subset of interactions in which every user and every
/// item has at least `k` interactions. Input order is preserved.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    if k <= 1 {
        return interactions.to_vec();
    }
    let mut user_ids: HashMap<&str, usize> = HashMap::new();
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let edges: Vec<(usize, usize)> = interactions
        .iter()
        .map(|it| {
            let nu = user_ids.len();
            let u = *user_ids.entry(it.user.as_str()).or_insert(nu);
            let ni = item_ids.len();
            let v = *item_ids.entry(it.item.as_str()).or_insert(ni);
            (u, v)
        })
        .collect();
    let mut user_deg = vec![0usize; user_ids.len()];
    let mut item_deg = vec![0usize; item_ids.len()];
    let mut user_edges = vec![Vec::new(); user_ids.len()];
    let mut item_edges = vec![Vec::new(); item_ids.len()];
    for (e, &(u, v)) in edges.iter().enumerate() {
        user_deg[u] += 1;
        item_deg[v] += 1;
        user_edges[u].push(e);
        item_edges[v].push(e);
    }
    let mut alive = vec![true; edges.len()];
    let mut user_gone = vec![false; user_deg.len()];
    let mut item_gone = vec![false; item_deg.len()];
    // (is_user, index)
    let mut queue: VecDeque<(bool, usize)> = VecDeque::new();
    for (u, &d) in user_deg.iter().enumerate() {
        if d < k {
            queue.push_back((true, u));
        }
    }
    for (v, &d) in item_deg.iter().enumerate() {
        if d < k {
            queue.push_back((false, v));
        }
    }
    while let Some((is_user, n)) = queue.pop_front() {
        let gone = if is_user { &mut user_gone[n] } else { &mut item_gone[n] };
        if *gone {
            continue;
        }
        *gone = true;
        let incident = if is_user { &user_edges[n] } else { &item_edges[n] };
        for &e in incident {
            if !alive[e] {
                continue;
            }
            alive[e] = false;
            let (u, v) = edges[e];
            if is_user {
                item_deg[v] -= 1;
                if item_deg[v] < k && !item_gone[v] {
                    queue.push_back((false, v));
                }
            } else {
                user_deg[u] -= 1;
                if user_deg[u] < k && !user_gone[u] {
                    queue.push_back((true, u));
                }
            }
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(it, _)| it.clone())
        .collect()
}

/// Contiguous indices for users (`0..|U|`) and items (`1..=|V|`), assigned
/// by first appearance. Id `0` is padding and `|V| + 1` the mask token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        let mut c = Catalog::default();
        for it in interactions {
            if !c.user_index.contains_key(&it.user) {
                c.user_index.insert(it.user.clone(), c.users.len());
                c.users.push(it.user.clone());
            }
            if !c.item_index.contains_key(&it.item) {
                c.items.push(it.item.clone());
                c.item_index.insert(it.item.clone(), c.items.len());
            }
        }
        c
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn mask_id(&self) -> usize {
        self.items.len() + 1
    }

    pub fn user_index(&self, external: &str) -> Option<usize> {
        self.user_index.get(external).copied()
    }

    pub fn item_id(&self, external: &str) -> Option<usize> {
        self.item_index.get(external).copied()
    }

    pub fn external_item(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.items.get(i)).map(String::as_str)
    }

    pub fn external_user(&self, index: usize) -> Option<&str> {
        self.users.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
}

/// Chronological item lists per user; stable sort, so timestamp ties keep
/// input order.
pub fn build_sequences(interactions: &[Interaction], catalog: &Catalog) -> Vec<UserSequence> {
    let mut per_user: Vec<Vec<(i64, usize)>> = vec![Vec::new(); catalog.num_users()];
    for it in interactions {
        let (Some(u), Some(v)) = (catalog.user_index(&it.user), catalog.item_id(&it.item)) else {
            continue;
        };
        per_user[u].push((it.timestamp, v));
    }
    per_user
        .into_iter()
        .enumerate()
        .map(|(u, mut events)| {
            events.sort_by_key(|&(t, _)| t);
            UserSequence {
                user: catalog.users[u].clone(),
                items: events.into_iter().map(|(_, v)| v).collect(),
            }
        })
        .collect()
}

/// Leave-one-out split of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaveOneOut<'a> {
    /// Everything except the last two items; next-item targets are taken
    /// inside this prefix.
    pub train: &'a [usize],
    pub valid: usize,
    pub test: usize,
}

pub fn leave_one_out(sequence: &[usize]) -> Result<LeaveOneOut<'_>> {
    let n = sequence.len();
    if n < 3 {
        return Err(Error::SequenceTooShort { need: 3, got: n });
    }
    Ok(LeaveOneOut {
        train: &sequence[..n - 2],
        valid: sequence[n - 2],
        test: sequence[n - 1],
    })
}

/// Keep the newest `maxlen` items and left-pad with `pad_id`, so the last
/// position always holds the newest item. Returns the ids and the true length.
pub fn pad_truncate(sequence: &[usize], maxlen: usize, pad_id: usize) -> (Vec<usize>, usize) {
    let keep = sequence.len().min(maxlen);
    let mut out = vec![pad_id; maxlen - keep];
    out.extend_from_slice(&sequence[sequence.len() - keep..]);
    (out, keep)
}

/// `n` items drawn uniformly from `1..=num_items` minus the items of
/// `history`, with replacement.
pub fn sample_negatives<R: Rng + ?Sized>(rng: &mut R, history: &[usize], num_items: usize, n: usize) -> Result<Vec<usize>> {
    let seen: HashSet<usize> = history.iter().copied().filter(|&v| (1..=num_items).contains(&v)).collect();
    if seen.len() >= num_items {
        return Err(Error::NoEligibleItems);
    }
    if seen.len() * 2 > num_items {
        let eligible: Vec<usize> = (1..=num_items).filter(|v| !seen.contains(v)).collect();
        return Ok((0..n).map(|_| eligible[rng.random_range(0..eligible.len())]).collect());
    }
    Ok((0..n)
        .map(|_| loop {
            let v = rng.random_range(1..=num_items);
            if !seen.contains(&v) {
                break v;
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub seq_len: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 100,
            seq_len: 20,
            concentration: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub interactions: Vec<Interaction>,
    /// Row-stochastic matrix; `transitions[a][b]` is `P(next = b | current = a)`
    /// over 0-based item indices (external id `i{a+1}`).
    pub transitions: Vec<Vec<f64>>,
}

/// Users walk a random first-order Markov chain whose rows are drawn from a
/// symmetric Dirichlet. Small concentrations give sharp, learnable rows.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.num_items < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 items".into()));
    }
    if !(cfg.concentration > 0.0 && cfg.concentration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {}",
            cfg.concentration
        )));
    }
    let gamma = Gamma::new(cfg.concentration, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = RngStream::new(cfg.seed, "synth/transitions");
    let transitions: Vec<Vec<f64>> = (0..cfg.num_items)
        .map(|_| {
            let mut row: Vec<f64> = (0..cfg.num_items).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = row.iter().sum();
            if total > 0.0 && total.is_finite() {
                row.iter_mut().for_each(|p| *p /= total);
            } else {
                // every draw underflowed: fall back to a one-hot row
                let hot = rng.random_range(0..cfg.num_items);
                row.iter_mut().enumerate().for_each(|(j, p)| *p = if j == hot { 1.0 } else { 0.0 });
            }
            row
        })
        .collect();

    let mut walk = RngStream::new(cfg.seed, "synth/walks");
    let mut interactions = Vec::with_capacity(cfg.num_users * cfg.seq_len);
    for u in 0..cfg.num_users {
        let mut state = walk.random_range(0..cfg.num_items);
        for t in 0..cfg.seq_len {
            interactions.push(Interaction::new(format!("u{}", u + 1), format!("i{}", state + 1), t as i64 + 1));
            state = sample_row(&transitions[state], &mut walk);
        }
    }
    Ok(Synthetic {
        interactions,
        transitions,
    })
}

fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // rounding left u above the cumulative sum: take the last non-zero entry
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Every kept user's full sequence plus the catalog size. Users with fewer
/// than three items cannot be split and are dropped at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    num_items: usize,
    users: Vec<UserSequence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

const ITEMS_FILE: &str = "items.tsv";
const SEQUENCES_FILE: &str = "sequences.tsv";

impl SplitDataset {
    pub fn new(num_items: usize, users: Vec<UserSequence>) -> Result<Self> {
        for u in &users {
            if let Some(&bad) = u.items.iter().find(|&&v| v == PAD_ID || v > num_items) {
                return Err(Error::IdOutOfRange {
                    id: bad,
                    rows: num_items + 1,
                });
            }
        }
        let users = users.into_iter().filter(|u| u.items.len() >= 3).collect();
        Ok(Self { num_items, users })
    }

    /// Filter, index and split raw interactions.
    pub fn from_interactions(interactions: &[Interaction], kcore: usize) -> Result<(Self, Catalog)> {
        let kept = k_core_filter(interactions, kcore);
        let catalog = Catalog::from_interactions(&kept);
        let seqs = build_sequences(&kept, &catalog);
        Ok((Self::new(catalog.num_items(), seqs)?, catalog))
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn mask_id(&self) -> usize {
        self.num_items + 1
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn users(&self) -> &[UserSequence] {
        &self.users
    }

    pub fn split(&self, u: usize) -> LeaveOneOut<'_> {
        leave_one_out(&self.users[u].items).expect("sequences hold at least 3 items")
    }

    /// History preceding the target of `split`. The test context includes
    /// the validation item.
    pub fn context(&self, u: usize, split: Split) -> (&[usize], usize) {
        let items = &self.users[u].items;
        let n = items.len();
        match split {
            Split::Valid => (&items[..n - 2], items[n - 2]),
            Split::Test => (&items[..n - 1], items[n - 1]),
        }
    }

    /// Write `items.tsv` (`id \t external`) and `sequences.tsv`
    /// (`user \t space-separated ids`) into `dir`.
    pub fn save(&self, dir: &Path, catalog: &Catalog) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let items_path = dir.join(ITEMS_FILE);
        let write = |path: &Path, body: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| -> Result<()> {
            let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(f);
            body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
        };
        write(&items_path, &|w| {
            for id in 1..=catalog.num_items() {
                writeln!(w, "{id}\t{}", catalog.external_item(id).unwrap_or_default())?;
            }
            Ok(())
        })?;
        let seq_path = dir.join(SEQUENCES_FILE);
        write(&seq_path, &|w| {
            for u in &self.users {
                let ids: Vec<String> = u.items.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}\t{}", u.user, ids.join(" "))?;
            }
            Ok(())
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<String> {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let num_items = read(ITEMS_FILE)?.lines().filter(|l| !l.is_empty()).count();
        let mut users = Vec::new();
        for (i, line) in read(SEQUENCES_FILE)?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (user, ids) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `user \\t ids`".into(),
            })?;
            let items = ids
                .split_whitespace()
                .map(|s| {
                    s.parse::<usize>().map_err(|e| Error::Parse {
                        line: i + 1,
                        msg: format!("bad item id `{s}`: {e}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            users.push(UserSequence {
                user: user.to_string(),
                items,
            });
        }
        Self::new(num_items, users)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn edges(list: &[(&str, &str)]) -> Vec<Interaction> {
        list.iter()
            .enumerate()
            .map(|(t, (u, v))| Interaction::new(*u, *v, t as i64))
            .collect()
    }

    #[test]
    fn parse_examples() {
        let got = parse_interactions("u1\ti9\t100\n".as_bytes()).unwrap();
        assert_eq!(got, vec![Interaction::new("u1", "i9", 100)]);
        assert!(parse_interactions("".as_bytes()).unwrap().is_empty());
        match parse_interactions("u1\ti9\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_skips_comments_and_reports_line() {
        let src = "# header\nu1\ti1\t1\nu2\ti2\tx\n";
        match parse_interactions(src.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let ok = parse_interactions("# c\nu1\ti1\t1\n#x\nu2\ti2\t5\n".as_bytes()).unwrap();
        assert_eq!(ok.len(), 2);
    }

    /// Brute force: drop any edge whose endpoint degree is below k, repeat.
    fn naive_k_core(input: &[Interaction], k: usize) -> Vec<Interaction> {
        let mut cur = input.to_vec();
        loop {
            let mut du: HashMap<String, usize> = HashMap::new();
            let mut dv: HashMap<String, usize> = HashMap::new();
            for it in &cur {
                *du.entry(it.user.clone()).or_default() += 1;
                *dv.entry(it.item.clone()).or_default() += 1;
            }
            let next: Vec<Interaction> = cur.iter().filter(|it| du[&it.user] >= k && dv[&it.item] >= k).cloned().collect();
            if next.len() == cur.len() {
                return next;
            }
            cur = next;
        }
    }

    #[test]
    fn k_core_cascade_empties_small_instance() {
        let input = edges(&[("a", "x"), ("a", "y"), ("b", "x"), ("c", "z")]);
        assert!(naive_k_core(&input, 2).is_empty());
        assert!(k_core_filter(&input, 2).is_empty());
    }

    #[test]
    fn k_core_fixed_points() {
        let input = edges(&[("a", "x"), ("a", "y"), ("b", "x"), ("b", "y")]);
        assert_eq!(k_core_filter(&input, 2), input);
        assert_eq!(k_core_filter(&input, 1), input);
    }

    fn arb_edges() -> impl Strategy<Value = Vec<Interaction>> {
        prop::collection::vec((0u8..8, 0u8..8), 0..60).prop_map(|es| {
            es.into_iter()
                .enumerate()
                .map(|(t, (u, v))| Interaction::new(format!("u{u}"), format!("i{v}"), t as i64))
                .collect()
        })
    }

    fn as_multiset(v: &[Interaction]) -> Vec<(String, String, i64)> {
        let mut out: Vec<_> = v.iter().map(|i| (i.user.clone(), i.item.clone(), i.timestamp)).collect();
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn k_core_matches_brute_force(input in arb_edges(), k in 1usize..4) {
            prop_assert_eq!(k_core_filter(&input, k), naive_k_core(&input, k));
        }

        #[test]
        fn k_core_order_invariant(input in arb_edges(), k in 1usize..4, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = input.clone();
            shuffled.shuffle(&mut RngStream::new(seed, "perm"));
            prop_assert_eq!(as_multiset(&k_core_filter(&input, k)), as_multiset(&k_core_filter(&shuffled, k)));
        }

        #[test]
        fn pad_truncate_round_trip(seq in prop::collection::vec(1usize..50, 0..80), maxlen in 1usize..60) {
            let (ids, len) = pad_truncate(&seq, maxlen, PAD_ID);
            prop_assert_eq!(ids.len(), maxlen);
            let stripped: Vec<usize> = ids.into_iter().filter(|&v| v != PAD_ID).collect();
            let keep = seq.len().min(maxlen);
            prop_assert_eq!(len, keep);
            prop_assert_eq!(&stripped[..], &seq[seq.len() - keep..]);
        }

        #[test]
        fn leave_one_out_targets_are_not_train_targets(seq in prop::collection::vec(1usize..30, 3..40)) {
            let s = leave_one_out(&seq).unwrap();
            // train targets are positions 1.. of the prefix, by index
            prop_assert_eq!(s.train.len() + 2, seq.len());
            prop_assert_eq!(s.valid, seq[seq.len() - 2]);
            prop_assert_eq!(s.test, seq[seq.len() - 1]);
        }
    }

    #[test]
    fn leave_one_out_examples() {
        let s = [1, 2, 3, 4, 5];
        let split = leave_one_out(&s).unwrap();
        assert_eq!((split.train, split.valid, split.test), (&[1, 2, 3][..], 4, 5));
        let split = leave_one_out(&[1, 2, 3]).unwrap();
        assert_eq!((split.train, split.valid, split.test), (&[1][..], 2, 3));
        assert!(leave_one_out(&[1, 2]).is_err());
    }

    #[test]
    fn pad_truncate_examples() {
        assert_eq!(pad_truncate(&[1, 2, 3], 5, 0), (vec![0, 0, 1, 2, 3], 3));
        let long: Vec<usize> = (1..=60).collect();
        assert_eq!(pad_truncate(&long, 50, 0).0, (11..=60).collect::<Vec<_>>());
        assert_eq!(pad_truncate(&[], 3, 0), (vec![0, 0, 0], 0));
    }

    #[test]
    fn negatives_forced_and_excluded() {
        let mut rng = RngStream::new(1, "negatives");
        let got = sample_negatives(&mut rng, &[1, 2], 3, 50).unwrap();
        assert!(got.iter().all(|&v| v == 3));
        assert!(matches!(sample_negatives(&mut rng, &[1, 2, 3], 3, 1), Err(Error::NoEligibleItems)));
        let hist: Vec<usize> = (1..=40).step_by(3).collect();
        let got = sample_negatives(&mut rng, &hist, 40, 2000).unwrap();
        assert!(got.iter().all(|v| !hist.contains(v) && (1..=40).contains(v)));
    }

    #[test]
    fn negatives_uniform_over_eligible() {
        let mut rng = RngStream::new(5, "negatives");
        let draws = 100_000;
        let got = sample_negatives(&mut rng, &[1], 100, draws).unwrap();
        let mut counts = vec![0usize; 101];
        for v in got {
            counts[v] += 1;
        }
        assert_eq!(counts[1], 0);
        let p = 1.0 / 99.0;
        let se = (draws as f64 * p * (1.0 - p)).sqrt();
        let mean = draws as f64 * p;
        // widest of 99 bins: allow 4.5 s.e. so the family-wise check is stable
        for (v, &c) in counts.iter().enumerate().skip(2) {
            assert!((c as f64 - mean).abs() <= 4.5 * se, "item {v}: {c} vs {mean}");
        }
        let within3 = counts.iter().skip(2).filter(|&&c| (c as f64 - mean).abs() <= 3.0 * se).count();
        assert!(within3 >= 97, "only {within3}/99 bins within 3 s.e.");
    }

    #[test]
    fn synthetic_count_and_timestamps() {
        let cfg = SynthConfig {
            num_users: 7,
            num_items: 10,
            seq_len: 6,
            concentration: 0.5,
            seed: 3,
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert_eq!(s.interactions.len(), 42);
        assert!(s.interactions.iter().all(|i| (1..=6).contains(&i.timestamp)));
        for row in &s.transitions {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(generate_synthetic(&SynthConfig { num_items: 1, ..cfg }).is_err());
    }

    #[test]
    fn synthetic_small_concentration_is_nearly_deterministic() {
        let cfg = SynthConfig {
            num_users: 20,
            num_items: 30,
            seq_len: 10,
            concentration: 1e-3,
            seed: 9,
        };
        let s = generate_synthetic(&cfg).unwrap();
        let peak: f64 = s.transitions.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / 30.0;
        assert!(peak > 0.9, "mean row peak {peak}");
    }

    #[test]
    fn synthetic_counts_track_matrix() {
        // 10 items × 1000 users × 1001 steps gives ≈10⁵ transitions per row
        let cfg = SynthConfig {
            num_users: 100,
            num_items: 10,
            seq_len: 1001,
            concentration: 0.5,
            seed: 21,
        };
        let s = generate_synthetic(&cfg).unwrap();
        let mut counts = vec![vec![0usize; 10]; 10];
        let ids: Vec<usize> = s.interactions.iter().map(|i| i.item[1..].parse::<usize>().unwrap() - 1).collect();
        for (w, pair) in ids.windows(2).enumerate() {
            // skip the boundary between two users
            if (w + 1) % cfg.seq_len == 0 {
                continue;
            }
            counts[pair[0]][pair[1]] += 1;
        }
        for (a, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total < 1000 {
                continue;
            }
            let tv: f64 = row
                .iter()
                .zip(&s.transitions[a])
                .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            assert!(tv <= 0.1, "row {a}: tv {tv}");
        }
    }

    #[test]
    fn catalog_from_first_appearance() {
        let input = edges(&[("b", "y"), ("a", "x"), ("b", "x")]);
        let c = Catalog::from_interactions(&input);
        assert_eq!(c.item_id("y"), Some(1));
        assert_eq!(c.item_id("x"), Some(2));
        assert_eq!(c.user_index("b"), Some(0));
        assert_eq!(c.mask_id(), 3);
        assert_eq!(Catalog::from_interactions(&input), c);
    }

    #[test]
    fn sequences_sorted_with_stable_ties() {
        let input = vec![
            Interaction::new("u", "c", 5),
            Interaction::new("u", "a", 1),
            Interaction::new("u", "b", 5),
        ];
        let c = Catalog::from_interactions(&input);
        let s = build_sequences(&input, &c);
        let names: Vec<&str> = s[0].items.iter().map(|&v| c.external_item(v).unwrap()).collect();
        assert_eq!(names, vec!["a", "c", "b"]);
    }

    #[test]
    fn save_and_load_prepared_dir() {
        let dir = tempfile::tempdir().unwrap();
        let syn = generate_synthetic(&SynthConfig {
            num_users: 30,
            num_items: 8,
            seq_len: 7,
            concentration: 1.0,
            seed: 1,
        })
        .unwrap();
        let (ds, cat) = SplitDataset::from_interactions(&syn.interactions, 5).unwrap();
        ds.save(dir.path(), &cat).unwrap();
        assert_eq!(SplitDataset::load(dir.path()).unwrap(), ds);
    }
}
