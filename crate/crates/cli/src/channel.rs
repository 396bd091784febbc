use pmu_prospector::backend::SimBackend;
use pmu_prospector::side_channel::{
    channel_accuracies, recover_secret, write_channel_screen_csv, ChannelRunReport, ChannelScreenRow, CostModel,
    GadgetSpec, Victim,
};

use crate::{par_map, read_file, write_file, ChannelCommand, Ctx, Failure, Outcome};

fn secret(path: &std::path::Path) -> Result<Vec<u8>, Failure> {
    let bytes = read_file(path)?;
    if bytes.is_empty() {
        return Err(Failure::Runtime(format!("{}: secret file is empty", path.display())));
    }
    Ok(bytes)
}

fn iterations(ctx: &Ctx, flag: Option<u32>) -> Result<u32, Failure> {
    match flag.or(ctx.file.iterations).unwrap_or(10) {
        0 => Err(Failure::Usage("--iterations must be at least 1".into())),
        n => Ok(n),
    }
}

pub(crate) fn dispatch(ctx: &Ctx, cmd: ChannelCommand) -> Outcome {
    ctx.require_sim("sidechannel")?;
    match cmd {
        ChannelCommand::Run {
            attack,
            selector,
            iterations: it,
            secret_file,
            suppression,
            out,
        } => {
            let secret = secret(&secret_file)?;
            let spec = GadgetSpec::new(selector, attack, secret.len())
                .with_iterations(iterations(ctx, it)?)
                .with_suppression(suppression.into());
            let mut backend = SimBackend::new(ctx.sim_model()?);
            let victim = Victim { secret };
            let result = recover_secret(&spec, &victim, &CostModel::default(), &mut backend).map_err(Failure::runtime)?;
            let report = ChannelRunReport::new(&spec, &result, &victim.secret);
            let mut json = serde_json::to_string_pretty(&report).map_err(Failure::runtime)?;
            json.push('\n');
            let out = ctx.out_path(out, "sidechannel.json");
            write_file(&out, json.as_bytes())?;
            println!(
                "{} via {selector}: {} bytes, error rate {:.4}, {:.2} Bps (modeled) -> {}",
                attack.as_str(),
                victim.secret.len(),
                report.error_rate,
                report.throughput_bps,
                out.display()
            );
            Ok(())
        }
        ChannelCommand::Screen {
            attack,
            report,
            iterations: it,
            secret_file,
            suppression,
            out,
        } => {
            let secret = secret(&secret_file)?;
            let r = pmu_prospector::collector::load_report(&report).map_err(Failure::runtime)?;
            let hidden: Vec<_> = r.hidden_selectors().collect();
            let template = GadgetSpec::new(Default::default(), attack, secret.len())
                .with_iterations(iterations(ctx, it)?)
                .with_suppression(suppression.into());
            let model = ctx.sim_model()?;
            let victim = Victim { secret };
            let results = par_map(&hidden, ctx.jobs, |sel| {
                let mut backend = SimBackend::new(model.clone());
                channel_accuracies(&[*sel], &template, &victim, &mut backend)
            });
            let mut rows = Vec::with_capacity(hidden.len());
            for r in results {
                let (sel, acc) = r.map_err(Failure::runtime)?[0];
                rows.push(ChannelScreenRow::new(sel, acc));
            }
            let mut buf = Vec::new();
            write_channel_screen_csv(&rows, &mut buf).map_err(Failure::runtime)?;
            let out = ctx.out_path(out, "channel_screening.csv");
            write_file(&out, &buf)?;
            println!(
                "{}: {} of {} hidden selectors reach accuracy >= 0.80 -> {}",
                attack.as_str(),
                rows.iter().filter(|r| r.passed).count(),
                rows.len(),
                out.display()
            );
            Ok(())
        }
    }
}
