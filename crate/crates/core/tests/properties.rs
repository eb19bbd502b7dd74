mod support;

use proptest::prelude::*;

use mgreid::association::{dbscan, split_camera_proxies, ClusterAssignment};
use mgreid::config::{Config, TrainConfig};
use mgreid::eval::{attention_rollout, evaluate, EvalSet};
use mgreid::head::stripe_ranges;
use mgreid::memory::{contrastive_loss, HeadId, ProxyMemory};
use mgreid::tensor::Tensor;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-6 {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        return e;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn units(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim).prop_map(unit), n)
}

proptest! {
    #[test]
    fn memory_rows_stay_unit(
        bank in units(5, 6),
        updates in prop::collection::vec((0usize..5, prop::collection::vec(-1.0f64..1.0, 6)), 1..60),
        momentum in 0.0f64..1.0,
    ) {
        let mut mem = ProxyMemory { bank: Tensor::from_rows(&bank), momentum, temperature: 0.07, head: HeadId::Global };
        for (u, f) in updates {
            mem.update(u, &unit(f));
        }
        for u in 0..5 {
            let n = mem.bank.row(u).iter().map(|x| x * x).sum::<f64>().sqrt();
            // antipodal blends can cancel; those rows are guarded, not normalized
            prop_assert!((n - 1.0).abs() < 1e-9 || n < 1e-6);
        }
    }

    #[test]
    fn contrastive_loss_is_nonnegative_and_order_free(
        bank in units(6, 4),
        f in prop::collection::vec(-1.0f64..1.0, 4).prop_map(unit),
        split in 1usize..5,
        tau in 0.02f64..2.0,
    ) {
        let mem = ProxyMemory { bank: Tensor::from_rows(&bank), momentum: 0.2, temperature: tau, head: HeadId::Global };
        let pos: Vec<usize> = (0..split).collect();
        let neg: Vec<usize> = (split..6).collect();
        let a = contrastive_loss(&f, &pos, &neg, &mem).unwrap();
        let rpos: Vec<usize> = pos.iter().rev().copied().collect();
        let rneg: Vec<usize> = neg.iter().rev().copied().collect();
        let b = contrastive_loss(&f, &rpos, &rneg, &mem).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn dbscan_with_one_sample_has_no_outliers(points in units(30, 3), eps in 0.01f64..1.0) {
        let a = dbscan(&Tensor::from_rows(&points), eps, 1);
        prop_assert_eq!(a.num_outliers(), 0);
        prop_assert!(a.labels.iter().all(|l| l.unwrap() < a.num_clusters));
    }

    #[test]
    fn dbscan_matches_oracle(points in units(40, 3), eps in 0.01f64..0.8, min_samples in 1usize..6) {
        let a = dbscan(&Tensor::from_rows(&points), eps, min_samples);
        prop_assert!(support::same_partition(&a.labels, &support::naive_dbscan(&points, eps, min_samples)));
    }

    #[test]
    fn camera_proxies_partition_clusters(
        labels in prop::collection::vec(prop::option::of(0usize..4), 1..40),
        seed_cams in prop::collection::vec(0usize..3, 40),
    ) {
        // renumber so cluster ids are dense
        let mut map = std::collections::BTreeMap::new();
        for l in labels.iter().flatten() {
            let next = map.len();
            map.entry(*l).or_insert(next);
        }
        let labels: Vec<Option<usize>> = labels.iter().map(|l| l.map(|c| map[&c])).collect();
        let cams = &seed_cams[..labels.len()];
        let clusters = ClusterAssignment { labels: labels.clone(), num_clusters: map.len() };
        let p = split_camera_proxies(&clusters, cams);
        prop_assert!(p.validate(&clusters, cams).is_ok());
        for (i, l) in labels.iter().enumerate() {
            match (l, p.pseudo_label[i]) {
                (None, None) => {}
                (Some(c), Some(u)) => {
                    prop_assert_eq!(p.proxy_cluster[u], *c);
                    prop_assert_eq!(p.proxy_camera[u], cams[i]);
                    prop_assert!(p.proxy_members[u].contains(&i));
                }
                _ => prop_assert!(false, "outlier status changed"),
            }
        }
    }

    #[test]
    fn metrics_are_bounded_and_cmc_monotone(
        q in units(4, 3),
        g in units(15, 3),
        qids in prop::collection::vec(0i64..3, 4),
        gids in prop::collection::vec(-1i64..3, 15),
        qcams in prop::collection::vec(0usize..2, 4),
        gcams in prop::collection::vec(0usize..2, 15),
    ) {
        let qs = EvalSet::new(Tensor::from_rows(&q), qids, qcams).unwrap();
        let gs = EvalSet::new(Tensor::from_rows(&g), gids, gcams).unwrap();
        let r = evaluate(&qs, &gs, 10).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!(r.cmc.iter().all(|c| (0.0..=1.0).contains(c)));
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        for (ap, hit) in r.ap.iter().zip(&r.first_hit) {
            prop_assert_eq!(ap.is_some(), hit.is_some());
        }
    }

    #[test]
    fn stripes_tile_the_grid(rows in 1usize..40, k in 1usize..40) {
        prop_assume!(k <= rows);
        let s = stripe_ranges(rows, k).unwrap();
        prop_assert_eq!(s.len(), k);
        prop_assert_eq!(s[0].start, 0);
        prop_assert_eq!(s[k - 1].end, rows);
        prop_assert!(s.windows(2).all(|w| w[0].end == w[1].start && w[0].len() >= w[1].len()));
        prop_assert!(s[0].len() - s[k - 1].len() <= 1);
    }

    #[test]
    fn rollout_rows_stay_stochastic(
        logits in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 2 * 5 * 5), 1..6),
    ) {
        let attns: Vec<Tensor<f64>> = logits
            .iter()
            .map(|l| {
                let mut data = Vec::with_capacity(l.len());
                for row in l.chunks(5) {
                    let z: f64 = row.iter().map(|v| v.exp()).sum();
                    data.extend(row.iter().map(|v| v.exp() / z));
                }
                Tensor::from_vec(&[2, 5, 5], data)
            })
            .collect();
        let r = attention_rollout(&attns, 2, 2).unwrap();
        for acc in &r.accumulated {
            for i in 0..5 {
                prop_assert!((acc.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        prop_assert!(r.map.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn learning_rate_decays_after_warmup(epoch in 0usize..50) {
        let t = TrainConfig::default();
        let lr = t.lr_at(epoch);
        prop_assert!(lr > 0.0 && lr <= t.base_lr);
        if epoch >= t.warmup_epochs {
            prop_assert!(t.lr_at(epoch + 1) <= lr);
        } else {
            prop_assert!(t.lr_at(epoch + 1) >= lr);
        }
    }

    #[test]
    fn config_survives_toml(cams in 2usize..8, eps in 0.05f64..1.0, k1 in 1usize..=4, k2 in 1usize..=4, seed in any::<u64>()) {
        let mut c = Config::toy(cams);
        c.association.dbscan_eps = eps;
        c.head.partitions = [k1, k2];
        c.train.seed = seed;
        prop_assert_eq!(Config::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }
}
