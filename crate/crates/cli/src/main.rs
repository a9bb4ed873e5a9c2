mod args;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::Parser;
use serde::Deserialize;
use serde_json::{json, Value};

use holo_core::analysis::{self, Dataset, Normalization, OverlapParams, PortWeight};
use holo_core::collector::{self, DirLake, Lake, Redaction, SyncPolicy};
use holo_core::controlplane::{ModuleSpec, Role, SensorDescriptor};
use holo_core::service::{admin_call, AdminOp, Agent, AgentOptions, ControllerServer, RemoteLake, ServiceError};
use holo_core::simnet::{self, SimConfig};
use holo_core::time::{Clock, SystemClock};

use args::*;

/// Failure carrying a stable kind for stderr.
struct Failure {
    kind: String,
    message: String,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let kind = e
            .downcast_ref::<ServiceError>()
            .map(ServiceError::kind)
            .unwrap_or_else(|| "Error".into());
        Failure {
            kind,
            message: format!("{e:#}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli).map_err(Failure::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if json {
                eprintln!("{}", json!({"error": {"kind": f.kind, "message": f.message}}));
            } else {
                eprintln!("error: {}: {}", f.kind, f.message);
            }
            ExitCode::from(1)
        }
    }
}

fn emit(json: bool, value: &Value, text: impl FnOnce() -> String) {
    if json {
        println!("{value}");
    } else {
        println!("{}", text());
    }
}

fn api_key(hub: &HubArgs) -> Result<String> {
    if let Some(k) = &hub.key {
        return Ok(k.clone());
    }
    let dir = hub
        .data_dir
        .as_ref()
        .ok_or_else(|| anyhow!("no API key: pass --key, HOLO_KEY or the controller --data-dir"))?;
    let path = dir.join("admin.key");
    Ok(fs::read_to_string(&path)
        .with_context(|| format!("reading {}", path.display()))?
        .trim()
        .to_string())
}

fn call(hub: &HubArgs, op: AdminOp) -> Result<Value> {
    Ok(admin_call(&hub.hub, &api_key(hub)?, op)?)
}

fn read_doc<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Every spec in a possibly multi-document file.
fn read_specs(path: &Path) -> Result<Vec<ModuleSpec>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for doc in serde_yaml::Deserializer::from_str(&text) {
        let v = serde_yaml::Value::deserialize(doc).with_context(|| format!("parsing {}", path.display()))?;
        match v {
            serde_yaml::Value::Null => {}
            serde_yaml::Value::Sequence(_) => out.extend(serde_yaml::from_value::<Vec<ModuleSpec>>(v)?),
            other => out.push(serde_yaml::from_value(other).with_context(|| format!("module spec in {}", path.display()))?),
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    match cli.command {
        Command::Controller {
            data_dir,
            listen,
            advertise,
        } => {
            let server = ControllerServer::open(&data_dir, &listen, advertise.as_deref(), clock)?;
            let addr = server.local_addr()?;
            let key = server.admin_key_path();
            emit(json, &json!({"listening": addr.to_string(), "admin_key": key}), || {
                format!("listening on {addr}\nadmin key: {}", key.display())
            });
            server.serve(Arc::new(AtomicBool::new(false)));
        }
        Command::Agent {
            data_dir,
            hub,
            bootstrap,
            descriptor,
            steps,
            interval,
        } => {
            let descriptor: Option<SensorDescriptor> = descriptor.as_deref().map(read_doc).transpose()?;
            let mut agent = Agent::start(
                AgentOptions {
                    data_dir,
                    hub_addr: hub,
                    bootstrap,
                    descriptor,
                },
                clock.clone(),
            )
            ?;
            let t = agent.tunnel().clone();
            emit(json, &json!({"sensor_id": t.sensor_id, "hub": t.hub_address}), || {
                format!("sensor {} connected to {}", t.sensor_id, t.hub_address)
            });
            match steps {
                Some(n) => {
                    for i in 0..n {
                        let r = agent.step()?;
                        if json {
                            println!("{}", serde_json::to_value(&r)?);
                        }
                        if i + 1 < n {
                            clock.sleep_micros(interval.unwrap_or(t.heartbeat_secs) * 1_000_000);
                        }
                    }
                }
                None => agent.run(&AtomicBool::new(false))?,
            }
        }
        Command::Token(TokenCmd::New { sensor, ttl, hub }) => {
            let v = call(
                &hub,
                AdminOp::TokenNew {
                    sensor_id: sensor,
                    ttl_secs: ttl.as_secs(),
                },
            )?;
            let token = v["token"].as_str().unwrap_or_default().to_string();
            let bootstrap = format!(
                "holo agent --bootstrap {token} --hub {} --descriptor sensor.yaml --data-dir /var/lib/holo",
                hub.hub
            );
            let mut out = v.clone();
            out["bootstrap_command"] = json!(bootstrap);
            emit(json, &out, || format!("{token}\n\nrun on the sensor:\n  {bootstrap}"));
        }
        Command::Deploy { file, hub } => {
            let specs = read_specs(&file)?;
            if specs.is_empty() {
                return Err(anyhow!("{} holds no module spec", file.display()));
            }
            let mut results = Vec::new();
            for spec in specs {
                results.push(call(&hub, AdminOp::Deploy { spec })?);
            }
            emit(json, &json!(results), || {
                results
                    .iter()
                    .map(|r| {
                        format!(
                            "{}: +{} -{}",
                            r["spec"],
                            r["added"].as_array().map_or(0, Vec::len),
                            r["removed"].as_array().map_or(0, Vec::len)
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::Undeploy { name, hub } => {
            let v = call(&hub, AdminOp::Undeploy { name })?;
            emit(json, &v, || format!("removed from {} sensors", v["removed"].as_array().map_or(0, Vec::len)));
        }
        Command::Status { hub } => {
            let v = call(&hub, AdminOp::Status)?;
            emit(json, &v, || status_text(&v));
        }
        Command::Principal(PrincipalCmd::Add { name, role, org, hub }) => {
            let role = match role {
                RoleArg::Admin => Role::Admin,
                RoleArg::Reader => Role::Reader,
                RoleArg::Operator => Role::OrgOperator(org.unwrap_or_default()),
            };
            let v = call(&hub, AdminOp::PrincipalAdd { name, role })?;
            emit(json, &v, || v["api_key"].as_str().unwrap_or_default().to_string());
        }
        Command::Catalog(CatalogCmd::Put { name, file, hub }) => {
            let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let v = call(
                &hub,
                AdminOp::CatalogPut {
                    name,
                    bytes_b64: STANDARD.encode(bytes),
                },
            )?;
            emit(json, &v, || v["version"].as_str().unwrap_or_default().to_string());
        }
        Command::Catalog(CatalogCmd::Get { name, version, out, hub }) => {
            let v = call(&hub, AdminOp::CatalogGet { name, version })?;
            let bytes = STANDARD
                .decode(v["bytes_b64"].as_str().unwrap_or_default())
                .context("catalog payload")?;
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            emit(json, &json!({"out": out, "bytes": bytes.len()}), || {
                format!("wrote {} bytes to {}", bytes.len(), out.display())
            });
        }
        Command::Sim(SimCmd::Run { file, out, pcap }) => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let config = SimConfig::from_yaml(&text)?;
            let report = simnet::run_to_dir(&config, &out, pcap)?;
            let h = &report.header;
            emit(json, &serde_json::to_value(h)?, || {
                let mut s = format!("{} events, {} packets\n", h.events, report.packets.len());
                for (id, t) in &h.sensors {
                    s.push_str(&format!(
                        "{id}: generated {} captured {} outbound {} darknet leaks {}\n",
                        t.generated, t.captured, t.outbound_sent, t.darknet_leaks
                    ));
                }
                s.trim_end().to_string()
            });
        }
        Command::Analyze(a) => analyze(json, a)?,
        Command::Rules(RulesCmd::Emit { sensor, out, hub }) => {
            let v = call(&hub, AdminOp::Rules { sensor_id: sensor.clone() })?;
            let text = v["iptables"].as_str().unwrap_or_default().to_string();
            let mut result = v.clone();
            if let Some(dir) = out {
                let generation = v["generation"].as_u64().unwrap_or(0);
                let sensor_dir = dir.join(&sensor);
                fs::create_dir_all(&sensor_dir)?;
                let path = sensor_dir.join(format!("holo-rules-{generation}.v4"));
                fs::write(&path, &text)?;
                result["path"] = json!(path);
            }
            emit(json, &result, || text.trim_end().to_string());
        }
        Command::Sync(cmd) => sync(json, cmd, clock)?,
    }
    Ok(())
}

fn status_text(v: &Value) -> String {
    let mut s = String::new();
    for sensor in v["sensors"].as_array().into_iter().flatten() {
        s.push_str(&format!(
            "{} org={} reachable={} honeypot={}\n",
            sensor["sensor_id"].as_str().unwrap_or_default(),
            sensor["org"].as_str().unwrap_or_default(),
            sensor["reachable"],
            sensor["honeypot_allowed"]
        ));
        for i in sensor["instances"].as_array().into_iter().flatten() {
            s.push_str(&format!(
                "  {} {}@{} {}\n",
                i["instance_id"].as_str().unwrap_or_default(),
                i["module"].as_str().unwrap_or_default(),
                i["version"].as_str().unwrap_or_default(),
                i["status"].as_str().unwrap_or_default()
            ));
        }
    }
    for spec in v["specs"].as_array().into_iter().flatten() {
        s.push_str(&format!(
            "spec {} ({}) v{} on {}\n",
            spec["name"].as_str().unwrap_or_default(),
            spec["module_kind"].as_str().unwrap_or_default(),
            spec["version"].as_str().unwrap_or_default(),
            spec["sensors"]
        ));
    }
    s.push_str(&format!("pending actions: {}", v["pending_actions"].as_array().map_or(0, Vec::len)));
    s
}

fn analyze(json: bool, a: AnalyzeArgs) -> Result<()> {
    let ds = Dataset::load(&a.input).with_context(|| format!("loading traces from {}", a.input.display()))?;
    let flows = ds.flows();
    let out = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let out = std::io::BufWriter::new(out);
    let summary = match a.what {
        Analysis::Flows => {
            analysis::write_flows_csv(out, &flows)?;
            json!({
                "analysis": "flows",
                "flows": flows.iter().map(|(s, f)| (s.clone(), f.len())).collect::<std::collections::BTreeMap<_, _>>(),
                "unique_senders": analysis::unique_senders(&flows, None),
            })
        }
        Analysis::Overlap => {
            let params = OverlapParams {
                window_start: a.window_start,
                window_days: a.window_days,
                min_packets: a.min_packets,
                top_fraction: (!a.all_senders).then_some(a.top_fraction),
                normalization: if a.jaccard {
                    Normalization::Jaccard
                } else {
                    Normalization::RowNormalized
                },
            };
            let m = analysis::common_sender_ratio(&flows, &params)?;
            analysis::write_overlap_csv(out, &m)?;
            json!({"analysis": "overlap", "params": params, "matrix": m})
        }
        Analysis::Portcdf => {
            let weight = match a.weight {
                WeightArg::Packets => PortWeight::Packets,
                WeightArg::Flows => PortWeight::Flows,
            };
            let dists: Vec<_> = flows.iter().map(|(s, f)| (s.clone(), analysis::port_cdf(f, weight))).collect();
            analysis::write_portcdf_csv(out, &dists)?;
            json!({"analysis": "portcdf", "weight": weight, "sensors": dists.iter().map(|(s, d)| json!({"sensor": s, "total": d.total, "ports": d.counts.len()})).collect::<Vec<_>>()})
        }
        Analysis::Timeline => {
            let series = analysis::timeline(&flows, &ds.days())?;
            analysis::write_timeline_csv(out, &series)?;
            json!({"analysis": "timeline", "days": ds.days(), "subnets": series.iter().map(|(s, r, _)| json!({"sensor": s, "subnet": r})).collect::<Vec<_>>()})
        }
    };
    emit(json, &summary, || format!("wrote {}", a.out.display()));
    Ok(())
}

fn open_lake(args: &LakeArgs, clock: Arc<dyn Clock>) -> Result<LakeHandle> {
    if let Some(dir) = &args.lake {
        return Ok(LakeHandle::Dir(DirLake::new(dir).with_context(|| format!("opening lake {}", dir.display()))?));
    }
    let data_dir = args
        .data_dir
        .clone()
        .ok_or_else(|| anyhow!("pass --lake DIR or the agent --data-dir"))?;
    let agent = Agent::start(
        AgentOptions {
            data_dir,
            hub_addr: args.hub.clone(),
            bootstrap: None,
            descriptor: None,
        },
        clock,
    )?;
    Ok(LakeHandle::Remote(Box::new(agent)))
}

enum LakeHandle {
    Dir(DirLake),
    Remote(Box<Agent>),
}

impl LakeHandle {
    fn with<T>(&mut self, f: impl FnOnce(&mut dyn Lake) -> T) -> T {
        match self {
            LakeHandle::Dir(l) => f(l),
            LakeHandle::Remote(a) => f(&mut RemoteLake { client: a.client_mut() }),
        }
    }
}

fn sync(json: bool, cmd: SyncCmd, clock: Arc<dyn Clock>) -> Result<()> {
    match cmd {
        SyncCmd::Run {
            lake,
            retention_hours,
            bandwidth_cap,
        } => {
            let policy = SyncPolicy {
                enabled: true,
                retention_hours,
                bandwidth_cap,
                redact: redaction(lake.redact),
            };
            policy.validate()?;
            let traces = collector::list_sealed(&lake.spool)?;
            let mut handle = open_lake(&lake, clock.clone())?;
            let report = handle.with(|l| collector::sync(&policy, &traces, l, &*clock));
            let v = serde_json::to_value(&report)?;
            emit(json, &v, || {
                format!(
                    "uploaded {} resumed {} present {} deleted {} bytes {}",
                    report.uploaded, report.resumed, report.already_present, report.deleted, report.bytes_sent
                )
            });
            if let Some(e) = report.error {
                return Err(anyhow!("sync stopped: {e}"));
            }
        }
        SyncCmd::Status { lake } => {
            let mut handle = open_lake(&lake, clock)?;
            let redact = redaction(lake.redact);
            let rows = handle.with(|l| collector::sync_status(&lake.spool, l, redact))?;
            emit(json, &serde_json::to_value(&rows)?, || {
                rows.iter()
                    .map(|r| format!("{} {} packets={} in_lake={}", r.hour_bucket, r.file, r.packet_count, r.in_lake))
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
    }
    Ok(())
}

fn redaction(on: bool) -> Redaction {
    if on {
        Redaction::TruncatePayloads
    } else {
        Redaction::None
    }
}
