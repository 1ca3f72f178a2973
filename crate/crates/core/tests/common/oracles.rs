//! Brute-force metric implementations written from the definitions, for
//! cross-checking the library's optimised versions.

use metaquill::metrics::ScoredItem;

type Toks = Vec<String>;

fn ngrams(t: &[String], n: usize) -> Vec<Toks> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn count(list: &[Toks], g: &Toks) -> usize {
    list.iter().filter(|x| *x == g).count()
}

fn distinct(list: &[Toks]) -> Vec<Toks> {
    let mut out: Vec<Toks> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu4(corpus: &[ScoredItem]) -> f64 {
    let mut m = [0f64; 4];
    let mut t = [0f64; 4];
    let (mut c_len, mut r_len) = (0f64, 0f64);
    for it in corpus {
        let c = it.candidate.len();
        c_len += c as f64;
        // closest reference length, shorter on ties
        let mut best = it.references[0].len();
        for r in &it.references {
            let (d, bd) = (r.len().abs_diff(c), best.abs_diff(c));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
        for n in 1..=4 {
            let cg = ngrams(&it.candidate, n);
            t[n - 1] += cg.len() as f64;
            for g in distinct(&cg) {
                let max_ref = it
                    .references
                    .iter()
                    .map(|r| count(&ngrams(r, n), &g))
                    .max()
                    .unwrap();
                m[n - 1] += count(&cg, &g).min(max_ref) as f64;
            }
        }
    }
    if m[0] == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for n in 0..4 {
        let p = if n > 0 && m[n] == 0.0 { 1.0 / (t[n] + 1.0) } else { m[n] / t[n] };
        s += p.ln() / 4.0;
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * s.exp()
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "brute force limited to short candidates");
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        let mut k = 0;
        for w in b {
            if k < sub.len() && *sub[k] == *w {
                k += 1;
            }
        }
        if k == sub.len() {
            best = best.max(sub.len());
        }
    }
    best
}

pub fn rouge_l(corpus: &[ScoredItem], beta: f64) -> f64 {
    let mut total = 0.0;
    for it in corpus {
        let mut best: f64 = 0.0;
        for r in &it.references {
            let l = lcs(&it.candidate, r) as f64;
            if l > 0.0 {
                let (p, rec) = (l / it.candidate.len() as f64, l / r.len() as f64);
                best = best.max((1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
            }
        }
        total += best;
    }
    total / corpus.len() as f64
}

pub fn cider(corpus: &[ScoredItem], n_max: usize, sigma: f64) -> f64 {
    let big_n = corpus.len() as f64;
    let df = |g: &Toks| -> f64 {
        corpus
            .iter()
            .filter(|it| it.references.iter().any(|r| ngrams(r, g.len()).contains(g)))
            .count() as f64
    };
    let vector = |t: &[String], n: usize| -> Vec<(Toks, f64)> {
        let all = ngrams(t, n);
        distinct(&all)
            .into_iter()
            .map(|g| {
                let tf = count(&all, &g) as f64;
                let w = tf * (big_n.ln() - df(&g).max(1.0).ln());
                (g, w)
            })
            .collect()
    };
    let norm = |v: &[(Toks, f64)]| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let mut total = 0.0;
    for it in corpus {
        let mut item = 0.0;
        for r in &it.references {
            let delta = it.candidate.len() as f64 - r.len() as f64;
            let pen = (-delta * delta / (2.0 * sigma * sigma)).exp();
            let mut s = 0.0;
            for n in 1..=n_max {
                let (vc, vr) = (vector(&it.candidate, n), vector(r, n));
                let (nc, nr) = (norm(&vc), norm(&vr));
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, wc) in &vc {
                    for (h, wr) in &vr {
                        if g == h {
                            dot += wc.min(*wr) * wr;
                        }
                    }
                }
                s += dot / (nc * nr) * pen;
            }
            item += s / n_max as f64;
        }
        total += 10.0 * item / it.references.len() as f64;
    }
    total / corpus.len() as f64
}

/// Every one-to-one exact-word alignment, keeping the maximum match count
/// and, among those, the fewest chunks.
fn best_alignment(c: &[String], r: &[String]) -> (usize, usize) {
    fn walk(c: &[String], r: &[String], i: usize, used: &mut Vec<bool>, pairs: &mut Vec<(usize, usize)>, best: &mut (usize, usize)) {
        if i == c.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(ci, rj)) in pairs.iter().enumerate() {
                let continues = k > 0 && pairs[k - 1] == (ci.wrapping_sub(1), rj.wrapping_sub(1));
                if !continues {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        walk(c, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == c[i] {
                used[j] = true;
                pairs.push((i, j));
                walk(c, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, 0);
    walk(c, r, 0, &mut vec![false; r.len()], &mut Vec::new(), &mut best);
    best
}

pub fn meteor_s(corpus: &[ScoredItem]) -> f64 {
    let mut total = 0.0;
    for it in corpus {
        let mut best: f64 = 0.0;
        for r in &it.references {
            let (m, ch) = best_alignment(&it.candidate, r);
            if m == 0 {
                continue;
            }
            let p = m as f64 / it.candidate.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let f = p * rec / (0.9 * p + 0.1 * rec);
            let frag = ch as f64 / m as f64;
            best = best.max(f * (1.0 - 0.5 * frag * frag * frag));
        }
        total += best;
    }
    total / corpus.len() as f64
}

/// Five items with repeated words, multiple references and unequal lengths.
pub fn fixture_corpus() -> Vec<ScoredItem> {
    vec![
        ScoredItem::from_text(
            "what color is the cat on the mat",
            &["what color is the cat", "what is the color of the cat on the mat"],
        ),
        ScoredItem::from_text(
            "how many dogs are there",
            &["how many dogs are in the picture", "how many animals are there"],
        ),
        ScoredItem::from_text("is the the man happy", &["is the man happy", "is the man sad or happy"]),
        ScoredItem::from_text(
            "where is the red bus going",
            &["where is the bus going", "what color is the bus"],
        ),
        ScoredItem::from_text(
            "what is the man on the left holding",
            &["what is the man holding on the left", "what is the person on the left holding"],
        ),
    ]
}
