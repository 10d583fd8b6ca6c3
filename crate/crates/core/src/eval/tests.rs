use super::*;
use crate::data::build_dataset;
use crate::net::NetConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Repeatedly picks the best remaining gallery item by a linear scan.
fn naive_order(q: &[f64], g: &[f64], dim: usize) -> Vec<usize> {
    let n = g.len() / dim;
    let cos = |j: usize| {
        let row = &g[j * dim..(j + 1) * dim];
        let dot: f64 = q.iter().zip(row).map(|(a, b)| a * b).sum();
        dot / (q.iter().map(|a| a * a).sum::<f64>().sqrt() * row.iter().map(|b| b * b).sum::<f64>().sqrt())
    };
    let mut left: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if cos(left[k]) > cos(left[best]) {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

fn brute_cmc(orders: &[Vec<usize>], qids: &[u32], gids: &[u32], max_rank: usize) -> Vec<f64> {
    (0..max_rank)
        .map(|r| {
            let hits = orders
                .iter()
                .zip(qids)
                .filter(|(o, &q)| o.iter().take(r + 1).any(|&g| gids[g] == q))
                .count();
            hits as f64 / orders.len() as f64
        })
        .collect()
}

fn brute_map(orders: &[Vec<usize>], qids: &[u32], gids: &[u32]) -> f64 {
    let mut total = 0.0;
    for (o, &q) in orders.iter().zip(qids) {
        let rel: Vec<usize> = (0..o.len()).filter(|&k| gids[o[k]] == q).collect();
        let ap: f64 = rel
            .iter()
            .map(|&k| (0..=k).filter(|&j| gids[o[j]] == q).count() as f64 / (k + 1) as f64)
            .sum::<f64>()
            / rel.len() as f64;
        total += ap;
    }
    total / orders.len() as f64
}

fn ranking(order: Vec<usize>) -> Ranking {
    let scores = vec![0.0; order.len()];
    Ranking { order, scores }
}

#[test]
fn average_precision_cases() {
    let ap = average_precision(&[true, false, true, false]).unwrap();
    assert!((ap - 0.8333333333333334).abs() < 1e-9);
    assert_eq!(average_precision(&[true; 5]), Some(1.0));
    for r in 1..6 {
        let mut rel = vec![false; 6];
        rel[r - 1] = true;
        assert!((average_precision(&rel).unwrap() - 1.0 / r as f64).abs() < 1e-15);
    }
    assert_eq!(average_precision(&[false, false]), None);
}

#[test]
fn cmc_first_hit_at_rank_two() {
    // gallery ids in ranked order: B, A, A
    let cmc = cmc_curve(&[ranking(vec![0, 1, 2])], &[0], &[1, 0, 0], 3).unwrap();
    assert_eq!(cmc, vec![0.0, 1.0, 1.0]);
    let perfect = cmc_curve(&[ranking(vec![1, 0])], &[7], &[3, 7], 2).unwrap();
    assert_eq!(perfect, vec![1.0, 1.0]);
    assert!(matches!(
        cmc_curve(&[ranking(vec![0])], &[9], &[1], 1),
        Err(NfsError::MissingIdentity(9))
    ));
    assert!(matches!(mean_ap(&[ranking(vec![0])], &[9], &[1]), Err(NfsError::NoRelevant(0))));
}

#[test]
fn self_match_and_orthogonality() {
    let g = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
    let r = rank(&[0.6, 0.8], &g, 2, Metric::Cosine).unwrap();
    assert_eq!(r[0].order[0], 2);
    assert!((r[0].scores[0] - 1.0).abs() < 1e-15);
    let r = rank(&[1.0, 0.0], &[0.0, 3.0], 2, Metric::Cosine).unwrap();
    assert_eq!(r[0].scores, vec![0.0]);
    let r = rank(&[0.0, 0.0], &[1.0, 1.0, 2.0, 0.0], 2, Metric::Cosine).unwrap();
    assert_eq!(r[0].order, vec![0, 1]);
    assert_eq!(r[0].scores, vec![0.0, 0.0]);
    // a negative-zero score still ties with zero and falls back to index order
    let r = rank(&[-1.0, 0.0], &[0.0, -1.0, 0.0, 1.0], 2, Metric::Cosine).unwrap();
    assert_eq!(r[0].order, vec![0, 1]);
}

#[test]
fn matches_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = rank(&random_rows(&mut rng, 10, 4), &random_rows(&mut rng, 10, 4), 4, Metric::Cosine).unwrap();
    assert_eq!(r.len(), 10);
    for instance in 0..200 {
        let nq = rng.random_range(1..=8);
        let ng = rng.random_range(1..=16);
        let dim = rng.random_range(1..=5);
        let q = random_rows(&mut rng, nq, dim);
        let g = random_rows(&mut rng, ng, dim);
        let gids: Vec<u32> = (0..ng).map(|_| rng.random_range(0..4)).collect();
        let qids: Vec<u32> = (0..nq).map(|_| gids[rng.random_range(0..ng)]).collect();
        let ranked = rank(&q, &g, dim, Metric::Cosine).unwrap();
        let naive: Vec<Vec<usize>> = (0..nq).map(|i| naive_order(&q[i * dim..(i + 1) * dim], &g, dim)).collect();
        let orders: Vec<Vec<usize>> = ranked.iter().map(|r| r.order.clone()).collect();
        assert_eq!(orders, naive, "instance {instance}");
        let cmc = cmc_curve(&ranked, &qids, &gids, ng).unwrap();
        assert_eq!(cmc, brute_cmc(&naive, &qids, &gids, ng));
        assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        let map = mean_ap(&ranked, &qids, &gids).unwrap();
        assert_eq!(map, brute_map(&naive, &qids, &gids));
    }
}

proptest! {
    #[test]
    fn invariant_under_gallery_permutation_and_scale(seed in 0u64..500, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nq, ng, dim) = (4, 9, 3);
        let q = random_rows(&mut rng, nq, dim);
        let g = random_rows(&mut rng, ng, dim);
        let gids: Vec<u32> = (0..ng as u32).map(|i| i % 3).collect();
        let qids: Vec<u32> = (0..nq as u32).map(|i| i % 3).collect();
        let base = rank(&q, &g, dim, Metric::Cosine).unwrap();
        let perm: Vec<usize> = (0..ng).map(|i| (i * 4 + seed as usize) % ng).collect();
        let gp: Vec<f64> = perm.iter().flat_map(|&i| g[i * dim..(i + 1) * dim].to_vec()).collect();
        let gids_p: Vec<u32> = perm.iter().map(|&i| gids[i]).collect();
        let permuted = rank(&q, &gp, dim, Metric::Cosine).unwrap();
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let scaled = rank(&qs, &g, dim, Metric::Cosine).unwrap();
        let cmc = cmc_curve(&base, &qids, &gids, ng).unwrap();
        prop_assert_eq!(&cmc, &cmc_curve(&permuted, &qids, &gids_p, ng).unwrap());
        prop_assert_eq!(&cmc, &cmc_curve(&scaled, &qids, &gids, ng).unwrap());
        let map = mean_ap(&base, &qids, &gids).unwrap();
        prop_assert!((map - mean_ap(&permuted, &qids, &gids_p).unwrap()).abs() < 1e-12);
        prop_assert!((map - mean_ap(&scaled, &qids, &gids).unwrap()).abs() < 1e-12);
    }
}

fn tiny_setup() -> (TwoStreamNet<f64>, Dataset) {
    let ds = Dataset::render(build_dataset(4, 3, 3, 2).unwrap());
    let cfg = NetConfig {
        stem_width: 4,
        stage_widths: vec![4, 8, 8],
        searched_stages: vec![1],
        num_identities: 4,
        ..NetConfig::default()
    };
    let mut net = TwoStreamNet::init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    net.derive_gates();
    (net, ds)
}

#[test]
fn extraction_is_deterministic_and_batch_independent() {
    let (mut net, ds) = tiny_setup();
    let idx = ds.manifest.test_indices();
    let a = extract_embeddings(&mut net, &ds, &idx, 64).unwrap();
    let b = extract_embeddings(&mut net, &ds, &idx, 64).unwrap();
    assert_eq!(a, b);
    let c = extract_embeddings(&mut net, &ds, &idx, 1).unwrap();
    for (x, y) in a.vectors.values().iter().zip(c.vectors.values()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn all_gates_zero_gives_constant_embeddings() {
    let (mut net, ds) = tiny_setup();
    for cell in net.search_cells_mut() {
        let n = cell.param().numel();
        cell.set_derived(vec![0.0; n]).unwrap();
    }
    let (report, _, query, _) = evaluate(&mut net, &ds, EvalProtocol::infrared_to_visible(), Metric::Cosine, 0).unwrap();
    let dim = net.embedding_dim();
    let first = &query.vectors.values()[..dim];
    assert!(query.vectors.values().chunks(dim).all(|row| row == first));
    // every score ties, so the ranking is gallery order: rank-1 hits only
    // when the first gallery item shares the query's identity
    let expected = query.identities.iter().filter(|&&id| id == 4).count() as f64 / query.identities.len() as f64;
    assert_eq!(report.rank1, expected);
    assert!(report.map > 0.0 && report.map <= 1.0);
}

#[test]
fn report_serializes_and_csv_dumps() {
    let (mut net, ds) = tiny_setup();
    let (report, rankings, q, g) = evaluate(&mut net, &ds, EvalProtocol::visible_to_infrared(), Metric::Cosine, 5).unwrap();
    assert_eq!(report.queries, 9);
    assert_eq!(report.gallery, 9);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    assert!(report.table().contains("visible-to-infrared"));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    write_rankings_csv(&path, &rankings, &q.identities, &g.identities, 3).unwrap();
    assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 1 + 9 * 3);
}
