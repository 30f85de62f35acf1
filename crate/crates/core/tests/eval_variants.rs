mod common;

use archseek_core::eval::{
    run_eval, run_report, variant_ranking, write_csv, EvalDataset, EvalQuery, SystemVariant,
};
use archseek_core::model::{Aspect, CaseId};

use common::*;

#[test]
fn variants_collapse_without_augmented_entries() {
    let gw = gateway();
    let cases = vec![
        build_case(
            &gw,
            1,
            "a",
            "timber roof over a courtyard",
            &[],
            &["timber roof"],
        ),
        build_case(
            &gw,
            2,
            "b",
            "glass facade with views",
            &[],
            &["glass facade"],
        ),
        build_case(&gw, 3, "c", "concrete shell by the sea", &[], &[]),
    ];
    let e = engine(database(&gw, cases), gw.clone());
    for q in ["timber courtyard", "glass", "sea shell roof"] {
        let r = |v| variant_ranking(&e, v, q, 0).unwrap();
        assert_eq!(
            r(SystemVariant::Full),
            r(SystemVariant::NoTextAugmentation),
            "{q}"
        );
        assert_eq!(
            r(SystemVariant::NoImageEmbedding),
            r(SystemVariant::TextOnly),
            "{q}"
        );
    }
}

#[test]
fn rankings_cover_every_case() {
    let gw = gateway();
    let cases = vec![
        build_case(
            &gw,
            1,
            "a",
            "timber roof",
            &[(Aspect::Form, "folded roof")],
            &["roof"],
        ),
        build_case(&gw, 2, "b", "glass facade", &[], &[]),
        build_case(
            &gw,
            5,
            "c",
            "brick vault",
            &[(Aspect::Style, "heavy brick")],
            &[],
        ),
    ];
    let e = engine(database(&gw, cases), gw.clone());
    for v in SystemVariant::ALL {
        let mut got = variant_ranking(&e, v, "roof", 3).unwrap();
        got.sort();
        assert_eq!(got, vec![CaseId(1), CaseId(2), CaseId(5)], "{v}");
    }
}

#[test]
fn single_query_has_zero_sem_and_csv_has_all_rows() {
    let gw = gateway();
    let cases = vec![
        build_case(&gw, 1, "a", "timber roof", &[], &[]),
        build_case(&gw, 2, "b", "glass facade", &[], &[]),
    ];
    let e = engine(database(&gw, cases), gw.clone());
    let ds = EvalDataset::new(vec![EvalQuery {
        query: "timber".into(),
        relevant: [CaseId(1)].into(),
    }])
    .unwrap();
    let r = run_eval(&e, &ds, SystemVariant::Full, 2, 0).unwrap();
    assert!(r
        .per_k
        .iter()
        .all(|m| m.precision_sem == 0.0 && m.recall_sem == 0.0));
    assert_eq!(r.at(1).unwrap().precision_mean, 1.0);

    let kmax = 4;
    let report = run_report(&e, &ds, &SystemVariant::ALL, kmax, 0).unwrap();
    assert!(report
        .assumptions
        .iter()
        .any(|a| a.starts_with("no_image_embedding")));
    let mut buf = Vec::new();
    write_csv(&report, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,k,metric,mean,sem");
    assert_eq!(lines.len() - 1, 5 * kmax * 2);
    assert!(run_eval(&e, &ds, SystemVariant::Full, 0, 0).is_err());
}
