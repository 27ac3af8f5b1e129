//! On the first two tasks of the default sequence, plain fine-tuning forgets
//! task 1 while the full method keeps it.

use std::path::Path;

use gnsp_cli::config::MethodName;
use gnsp_cli::experiment;
use gnsp_cli::RunConfig;

#[test]
fn plain_forgets_task_one_and_full_method_keeps_it() {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap();
    cfg.tasks.count = 2;
    cfg.output.spectra = false;
    let data = experiment::build_data(&cfg).unwrap();
    let initial = experiment::initial_model(&cfg).unwrap();

    let drop = |method| {
        let mut c = cfg.clone();
        c.trainer.method = method;
        let r = experiment::execute(&c, &data, initial.clone()).unwrap();
        r.outcome.accuracy.get(1, 1) - r.outcome.accuracy.get(2, 1)
    };
    let plain = drop(MethodName::PlainFinetune);
    let full = drop(MethodName::GnspFull);
    assert!(plain >= 0.15, "plain drop {plain}");
    assert!(full <= 0.02, "full drop {full}");
}
