use serde::Deserialize;
use vlb_core::eval::extract_choice;
use vlb_core::model::OptionItem;

#[derive(Deserialize)]
struct Labelled {
    options: Vec<OptionItem>,
    response: String,
    label: Option<String>,
}

#[test]
fn ladder_agrees_with_hand_labels() {
    let text = include_str!("fixtures/mcq_responses.jsonl");
    let rows: Vec<Labelled> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 200);
    let wrong: Vec<String> = rows
        .iter()
        .filter_map(|r| {
            let got = extract_choice(&r.response, &r.options);
            (got != r.label).then(|| format!("{:?}: got {got:?}, labelled {:?}", r.response, r.label))
        })
        .collect();
    assert!(wrong.is_empty(), "{} disagreements:\n{}", wrong.len(), wrong.join("\n"));
}
