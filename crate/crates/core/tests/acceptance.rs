use std::process::ExitCode;

use splitgame::config::VerifyBlock;
use splitgame::verify::{suite, DEFAULT_SEED};

fn main() -> ExitCode {
    let criteria = match suite(&VerifyBlock::default(), DEFAULT_SEED) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("acceptance suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    for c in &criteria {
        println!("{}", c.line());
    }
    let failed = criteria.iter().filter(|c| !c.pass()).count();
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
