// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/scenario.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "rhsim/page_table.hpp"
#include "rhsim/payload_lab.hpp"

namespace rhsim {

using json = nlohmann::ordered_json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_num(const std::string& key, const std::string& v) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("bad value for " + key + ": '" + v + "'");
  return out;
}

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string events_jsonl(const std::vector<Event>& ev) {
  std::string out;
  for (const auto& e : ev) {
    out += "{\"tick\":" + std::to_string(e.tick) + ",\"kind\":\"" + event_name(e.kind) +
           "\",\"ctx\":" + std::to_string(e.ctx) + ",\"frame\":" + std::to_string(e.frame) +
           ",\"detail\":" + std::to_string(e.detail) + "}\n";
  }
  return out;
}

json attack_json(const AttackReport& r, double total_latency) {
  json j;
  j["success"] = r.success;
  j["failure"] = r.failure;
  j["site"] = r.site_label;
  j["pte_bit"] = r.pte_bit;
  j["site_offset"] = hex(r.site_offset);
  j["fill_pages"] = r.fill_pages;
  j["massage_spikes"] = r.massage_spikes;
  j["massage_period"] = r.massage_period;
  j["massage_allocations"] = r.massage_allocations;
  j["dense_pages"] = r.dense_pages;
  j["dense_budget_bytes"] = r.dense_budget_bytes;
  j["step3_attempts"] = r.step3_attempts;
  j["attempts_to_first_own"] = r.attempts_to_first_own;
  j["step4_failures"] = r.step4_failures;
  j["attempt_outcomes"] = r.attempt_outcomes;
  j["corrupted_va"] = hex(r.corrupted_va);
  j["destination_va"] = hex(r.destination_va);
  j["windows"] = r.windows;
  json ph = json::object();
  for (const auto& [k, v] : r.phase_latency) ph[k] = v;
  j["phase_latency"] = ph;
  j["total_latency"] = total_latency;
  return j;
}

json base_report(const ScenarioConfig& cfg) {
  json j;
  j["scenario"] = cfg.scenario;
  j["seed"] = cfg.seed;
  json c = json::object();
  for (const auto& [k, v] : cfg.echo()) c[k] = v;
  j["config"] = c;
  return j;
}

AttackConfig attack_config(const ScenarioConfig& cfg) {
  AttackConfig ac;
  ac.geometry = cfg.geometry();
  ac.seed = cfg.seed;
  ac.site_label = cfg.site;
  ac.max_step3_retries = cfg.max_step3_retries;
  ac.spike_factor = cfg.spike_factor;
  return ac;
}

}  // namespace

// ---------------------------------------------------------------- config

void ScenarioConfig::set(const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "scenario") {
    if (std::find(kScenarios.begin(), kScenarios.end(), v) == kScenarios.end())
      throw ConfigError("unknown scenario '" + v + "'");
    scenario = v;
  } else if (key == "capacity_gib") {
    capacity_gib = parse_num<std::uint64_t>(key, v);
    if (capacity_gib == 0) throw ConfigError("capacity_gib must be positive");
  } else if (key == "banks") {
    banks = parse_num<std::uint32_t>(key, v);
    if (banks == 0 || (banks & (banks - 1))) throw ConfigError("banks must be a power of two");
  } else if (key == "row_size") {
    row_size = parse_num<std::uint32_t>(key, v);
    if (row_size == 0 || (row_size & (row_size - 1))) throw ConfigError("row_size must be a power of two");
  } else if (key == "profile") {
    profile = v;
  } else if (key == "timing_base") {
    timing_base = parse_num<double>(key, v);
  } else if (key == "timing_penalty") {
    timing_penalty = parse_num<double>(key, v);
  } else if (key == "timing_jitter") {
    timing_jitter = parse_num<double>(key, v);
    if (timing_jitter < 0 || timing_jitter >= 1) throw ConfigError("timing_jitter must be in [0,1)");
  } else if (key == "seed") {
    seed = parse_num<std::uint64_t>(key, v);
  } else if (key == "out") {
    out = v;
  } else if (key == "victim_percent") {
    victim_percent = parse_num<std::uint32_t>(key, v);
    if (victim_percent > 50) throw ConfigError("victim_percent must be at most 50");
  } else if (key == "site") {
    site = v;
  } else if (key == "max_step3_retries") {
    max_step3_retries = parse_num<std::uint32_t>(key, v);
  } else if (key == "spike_factor") {
    spike_factor = parse_num<double>(key, v);
  } else if (key == "frame_reads") {
    frame_reads = parse_num<std::uint32_t>(key, v);
  } else if (key == "periods") {
    periods = parse_num<std::uint32_t>(key, v);
  } else if (key == "race_window") {
    race_window = parse_num<double>(key, v);
    if (race_window < 0 || race_window > 1) throw ConfigError("race_window must be in [0,1]");
  } else if (key == "race_candidates") {
    race_candidates = parse_num<std::uint32_t>(key, v);
  } else if (key == "race_dump_ms") {
    race_dump_ms = parse_num<double>(key, v);
  } else if (key == "race_residency_ms") {
    race_residency_ms = parse_num<double>(key, v);
  } else if (key == "race_trials") {
    race_trials = parse_num<std::uint64_t>(key, v);
  } else if (key == "tamper_positions") {
    tamper_positions = parse_num<std::uint32_t>(key, v);
  } else if (key == "trials") {
    trials = parse_num<std::uint32_t>(key, v);
    if (trials == 0) throw ConfigError("trials must be positive");
  } else if (key == "jobs") {
    jobs = parse_num<std::uint32_t>(key, v);
    if (jobs == 0) throw ConfigError("jobs must be positive");
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

std::map<std::string, std::string> ScenarioConfig::echo() const {
  return {{"scenario", scenario},
          {"capacity_gib", std::to_string(capacity_gib)},
          {"banks", std::to_string(banks)},
          {"row_size", std::to_string(row_size)},
          {"profile", profile},
          {"timing_base", fmt(timing_base)},
          {"timing_penalty", fmt(timing_penalty)},
          {"timing_jitter", fmt(timing_jitter)},
          {"seed", std::to_string(seed)},
          {"victim_percent", std::to_string(victim_percent)},
          {"site", site},
          {"max_step3_retries", std::to_string(max_step3_retries)},
          {"spike_factor", fmt(spike_factor)},
          {"frame_reads", std::to_string(frame_reads)},
          {"periods", std::to_string(periods)},
          {"race_window", fmt(race_window)},
          {"race_candidates", std::to_string(race_candidates)},
          {"race_dump_ms", fmt(race_dump_ms)},
          {"race_residency_ms", fmt(race_residency_ms)},
          {"race_trials", std::to_string(race_trials)},
          {"tamper_positions", std::to_string(tamper_positions)},
          {"trials", std::to_string(trials)}};
}

Geometry ScenarioConfig::geometry() const {
  Geometry g;
  g.capacity = capacity_gib * GiB;
  g.banks = banks;
  g.row_size = row_size;
  if (kPage2M % (std::uint64_t{banks} * row_size) != 0)
    throw ConfigError("banks * row_size must divide 2 MiB");
  return g;
}

TimingModel ScenarioConfig::timing() const {
  return {timing_base, timing_penalty, timing_jitter};
}

ScenarioConfig parse_config(const std::string& text, ScenarioConfig base) {
  std::istringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(n) + ": expected key = value");
    base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return base;
}

// ---------------------------------------------------------------- harness

World make_world(const ScenarioConfig& cfg, std::uint64_t seed, bool with_host) {
  World w;
  GpuConfig gc;
  gc.geometry = cfg.geometry();
  gc.seed = seed;
  w.gpu = std::make_unique<Gpu>(gc);
  auto sites = cfg.profile.empty() ? default_profile(gc.geometry, gc.region0_distance)
                                   : parse_profile(read_file(cfg.profile));
  w.gpu->memory().register_sites(std::move(sites));
  if (with_host) w.host = std::make_unique<HostSystem>(w.gpu->host(), HostConfig{cfg.race_window, seed});
  w.victim_ctx = w.gpu->create_context();
  w.attacker_ctx = w.gpu->create_context();
  w.victim = std::make_unique<GuestSession>(*w.gpu, w.victim_ctx, seed ^ 0x5eed, cfg.timing());
  w.attacker = std::make_unique<GuestSession>(*w.gpu, w.attacker_ctx, seed, cfg.timing(),
                                              w.host.get());
  w.victim_bytes = (gc.geometry.capacity * cfg.victim_percent / 100) & ~(kPage2M - 1);
  if (w.victim_bytes > 0) {
    w.victim_va = w.victim->device_alloc(w.victim_bytes);
    std::vector<std::pair<std::uint64_t, std::uint64_t>> marks;
    for (std::uint64_t off = 0; off < w.victim_bytes; off += kPage2M)
      marks.emplace_back(w.victim_va + off, 0x5EC2E7000000ull | (off >> 21));
    w.victim->scatter_u64(marks);
  }
  return w;
}

double step3_destination_p(Gpu& gpu, std::uint32_t ctx, const ProfileHit& site, std::size_t groups) {
  const auto g = gpu.frames().peek_64k(groups);
  if (g.empty()) return 0;
  const std::uint64_t jump = pte_bit_to_jump(site.pte_bit);
  const bool down = site.direction == FlipDirection::one_to_zero;
  const std::uint64_t cap = gpu.memory().capacity();
  std::size_t hits = 0;
  for (std::uint64_t grp : g) {
    const std::uint64_t phys = grp * kPage64K;
    const int bit = static_cast<int>(((phys >> 12) >> (site.pte_bit - kPfnLowBit)) & 1);
    if (bit != (down ? 1 : 0)) continue;
    if (down ? phys < jump : phys + jump >= cap) continue;
    const std::uint64_t dest = down ? phys - jump : phys + jump;
    const auto owner = gpu.frame_owner(dest / kPage4K);
    if (!owner || owner->ctx != ctx) continue;
    if (is_tag(gpu.memory().read_u64(dest))) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(g.size());
}

FrameCheck check_random_frames(Gpu& gpu, ArbitraryRW& rw, std::uint32_t count, std::uint64_t seed) {
  FrameCheck fc;
  std::mt19937_64 rng(seed);
  const std::uint64_t frames = gpu.memory().capacity() / kPage4K;
  std::uniform_int_distribution<std::uint64_t> pick(0, frames - 1);
  const std::size_t batch = rw.windows().size();
  const std::uint64_t before = gpu.audit_violations();
  for (std::uint32_t done = 0; done < count;) {
    std::vector<std::uint64_t> phys;
    for (std::size_t k = 0; k < batch && done + phys.size() < count; ++k)
      phys.push_back(pick(rng) * kPage4K);
    gpu.arm_audit(true);
    const auto got = rw.read_frames(phys);
    gpu.arm_audit(false);
    for (std::size_t k = 0; k < phys.size(); ++k) {
      ++fc.reads;
      if (got[k] != gpu.memory().read_phys(phys[k], kPage4K)) ++fc.mismatches;
    }
    done += static_cast<std::uint32_t>(phys.size());
  }
  fc.violations = static_cast<std::uint32_t>(gpu.audit_violations() - before);
  return fc;
}

bool victim_tamper_visible(World& w, ArbitraryRW& rw) {
  if (w.victim_bytes == 0) return false;
  const std::uint64_t va = w.victim_va + w.victim_bytes / 2 + 0x1230;
  const auto phys = w.gpu->resident_phys(w.victim_ctx, va);
  if (!phys) return false;
  const std::vector<std::uint8_t> mark = {0xBA, 0xD0, 0xC0, 0xDE, 0x13, 0x37, 0x42, 0x99};
  const auto before = w.victim->read_data(va, mark.size());
  rw.write_phys(*phys, mark);
  const auto after = w.victim->read_data(va, mark.size());
  return before != mark && after == mark;
}

// ---------------------------------------------------------------- scenarios

namespace {

ScenarioResult run_eq1(const ScenarioConfig& cfg) {
  ScenarioResult res;
  GpuConfig gc;
  gc.geometry = cfg.geometry();
  gc.seed = cfg.seed;
  Gpu gpu(gc);
  const std::uint32_t helper_ctx = gpu.create_context();
  const std::uint32_t ctx = gpu.create_context();
  GuestSession helper(gpu, helper_ctx, cfg.seed ^ 0x4e1, cfg.timing());
  GuestSession g(gpu, ctx, cfg.seed, cfg.timing());

  // Fill device memory, then splinter the newest pages so small frames
  // stay free while no whole 2 MiB frame does.
  std::vector<std::uint64_t> pages;
  while (helper.mem_get_info() >= kPage2M) {
    const std::uint64_t va = helper.uvm_alloc(kPage2M);
    helper.timed_touch(va, kPage2M);
    pages.push_back(va);
  }
  const std::uint64_t allocs = allocations_to_next_pt_region(gc.region0_fill) +
                               std::uint64_t{cfg.periods} * 508 + 8;
  const std::uint64_t need_groups = allocs / 16 + 64;
  for (std::uint64_t i = 0; i < need_groups && i < pages.size(); ++i)
    helper.cpu_touch(pages[pages.size() - 1 - i], kPage64K);

  std::string csv = "alloc_index,latency,spike,pt_region\n";
  std::vector<std::uint64_t> spikes, regions;
  std::vector<double> hist;
  std::size_t ev_seen = gpu.events().size();
  for (std::uint64_t i = 0; i < allocs; ++i) {
    const std::uint64_t va = g.uvm_alloc(kPage2M + kPage4K);
    const double lat = g.timed_touch(va + kPage2M, kPage4K);
    bool spike = false;
    if (!hist.empty()) {
      std::vector<double> h = hist;
      std::nth_element(h.begin(), h.begin() + h.size() / 2, h.end());
      spike = lat > cfg.spike_factor * h[h.size() / 2];
    }
    if (!spike) {
      hist.push_back(lat);
      if (hist.size() > 255) hist.erase(hist.begin());
    }
    const auto& ev = gpu.events();
    bool region = false;
    for (std::size_t k = ev_seen; k < ev.size(); ++k)
      if (ev[k].kind == EventKind::pt_region && ev[k].ctx == ctx) region = true;
    ev_seen = ev.size();
    if (spike) spikes.push_back(i);
    if (region) regions.push_back(i);
    csv += std::to_string(i) + ',' + fmt(lat) + ',' + (spike ? "1" : "0") + ',' + (region ? "1" : "0") + '\n';
  }

  bool periodic = spikes.size() >= cfg.periods + 1;
  for (std::size_t k = 1; k < spikes.size(); ++k) periodic = periodic && spikes[k] - spikes[k - 1] == 508;
  const std::uint64_t first_expected = allocations_to_next_pt_region(gc.region0_fill);
  res.ok = periodic && !spikes.empty() && spikes.front() == first_expected && spikes == regions;
  res.report = base_report(cfg);
  res.report["first_spike"] = spikes.empty() ? -1 : static_cast<std::int64_t>(spikes.front());
  res.report["expected_first_spike"] = first_expected;
  res.report["spikes"] = spikes;
  res.report["period"] = spikes.size() >= 2 ? static_cast<std::int64_t>(spikes[1] - spikes[0]) : -1;
  res.report["spikes_match_pt_regions"] = spikes == regions;
  res.report["ok"] = res.ok;
  res.extra["eq1_trace.csv"] = csv;
  res.latency_csv = latency_csv({&helper, &g});
  res.events_jsonl = events_jsonl(gpu.events());
  return res;
}

ScenarioResult run_massage(const ScenarioConfig& cfg) {
  ScenarioResult res;
  World w = make_world(cfg, cfg.seed);
  AttackEngine e(*w.attacker, attack_config(cfg));
  res.report = base_report(cfg);
  try {
    w.gpu->arm_audit(true);
    e.step1_fill();
    e.step2_massage();
    e.dense_fill();
    w.gpu->arm_audit(false);
  } catch (const SimError& ex) {
    w.gpu->arm_audit(false);
    res.report["error"] = ex.what();
    res.report["ok"] = false;
    return res;
  }
  Gpu& gpu = *w.gpu;
  const std::uint64_t violations = gpu.audit_violations();
  const ProfileHit& hit = e.site();
  const std::uint64_t target = *gpu.resident_phys(w.attacker_ctx, hit.low_va) / kPage2M + 1;
  const auto& regs = gpu.regions(w.attacker_ctx);
  const std::uint64_t region = regs.back().frame2m;
  std::uint64_t valid = 0, total = 0;
  std::uint32_t min_pt = 32;
  const std::uint64_t pts = std::min<std::uint64_t>(kPage2M / kPt64KSize, e.report().dense_pages);
  for (std::uint64_t i = 0; i < pts; ++i) {
    const std::uint32_t v = gpu.valid_ptes_in_table(region * kPage2M + i * kPt64KSize, true);
    valid += v;
    total += 32;
    min_pt = std::min(min_pt, v);
  }
  const double density = total ? static_cast<double>(valid) / total : 0;
  res.report["attack"] = attack_json(e.report(), w.attacker->total_latency());
  res.report["target_frame"] = target;
  res.report["pt_region_frame"] = region;
  res.report["pt_region_at_target"] = region == target;
  res.report["density"] = density;
  res.report["min_valid_per_table"] = min_pt;
  res.report["audit_violations"] = violations;
  res.ok = region == target && density >= 0.968 && violations == 0;
  res.report["ok"] = res.ok;
  res.latency_csv = latency_csv({w.victim.get(), w.attacker.get()});
  res.events_jsonl = events_jsonl(gpu.events());
  return res;
}

ScenarioResult run_e2e(const ScenarioConfig& cfg, bool privesc) {
  ScenarioResult res;
  World w = make_world(cfg, cfg.seed, privesc);
  AttackEngine e(*w.attacker, attack_config(cfg));
  w.gpu->arm_audit(true);
  auto rw = e.run();
  w.gpu->arm_audit(false);
  const std::uint64_t violations = w.gpu->audit_violations();
  res.report = base_report(cfg);
  res.report["attack"] = attack_json(e.report(), w.attacker->total_latency());
  json v;
  v["audit_violations"] = violations;
  bool ok = rw.has_value() && violations == 0;
  if (rw) {
    const FrameCheck fc = check_random_frames(*w.gpu, *rw, cfg.frame_reads, cfg.seed ^ 0xf7a3e);
    v["frame_reads"] = fc.reads;
    v["frame_mismatches"] = fc.mismatches;
    v["read_audit_violations"] = fc.violations;
    const bool tamper = victim_tamper_visible(w, *rw);
    v["victim_tamper_visible"] = tamper;
    ok = ok && fc.mismatches == 0 && fc.violations == 0 && tamper;
  }
  res.report["verification"] = v;
  if (privesc && rw) {
    HostDma dma = e.escalate_to_host(*rw);
    w.gpu->arm_audit(true);
    const PrivescReport pr = run_privesc(dma, *w.attacker, *w.host, w.host->kernel().cred_addr);
    w.gpu->arm_audit(false);
    json p;
    p["attempts"] = pr.attempts;
    p["euid_before"] = pr.euid_before;
    p["euid_after"] = pr.euid_after;
    p["driver_state"] = pr.driver_state;
    p["kernel_state"] = pr.kernel_state;
    p["stable"] = pr.stable;
    p["queue_index"] = pr.queue_index;
    p["expected_seq"] = pr.expected_seq;
    p["audit_violations"] = w.gpu->audit_violations() - violations;
    res.report["privesc"] = p;
    ok = ok && pr.euid_before == kInitialEuid && pr.euid_after == 0 &&
         pr.driver_state == "crashed" && pr.kernel_state == "stable" &&
         w.gpu->audit_violations() == violations;
  } else if (privesc) {
    ok = false;
  }
  res.ok = ok;
  res.report["ok"] = ok;
  res.latency_csv = latency_csv({w.victim.get(), w.attacker.get()});
  res.events_jsonl = events_jsonl(w.gpu->events());
  return res;
}

ScenarioResult run_code_tamper(const ScenarioConfig& cfg) {
  ScenarioResult res;
  res.report = base_report(cfg);
  json runs = json::array();
  std::uint32_t found = 0, max_runs = 0;
  double survivor = 0;
  for (std::uint32_t i = 0; i < cfg.tamper_positions; ++i) {
    CodeLabParams p;
    p.seed = cfg.seed * 1000 + i;
    CodeLab lab = make_code_lab(p);
    const auto r = filter_pipeline(lab.image, lab.oracle, 100);
    const bool hit = r.found && lab.oracle.critical_branch() && r.critical_branch == *lab.oracle.critical_branch();
    found += hit;
    max_runs = std::max(max_runs, r.runs_used);
    survivor += r.survivor_fraction;
    json j;
    j["branches"] = lab.branch_count;
    j["found"] = hit;
    j["runs_used"] = r.runs_used;
    j["survivor_fraction"] = r.survivor_fraction;
    j["accuracy"] = r.final_run.accuracy;
    j["latency"] = r.final_run.latency;
    runs.push_back(j);
  }
  res.report["positions"] = cfg.tamper_positions;
  res.report["found"] = found;
  res.report["max_runs"] = max_runs;
  res.report["mean_survivor_fraction"] = cfg.tamper_positions ? survivor / cfg.tamper_positions : 0;
  res.report["runs"] = runs;
  res.ok = found == cfg.tamper_positions && max_runs < 100;
  res.report["ok"] = res.ok;
  res.latency_csv = "tick,ctx,op,latency\n";
  return res;
}

ScenarioResult run_key_race_scenario(const ScenarioConfig& cfg) {
  ScenarioResult res;
  res.report = base_report(cfg);
  RaceParams p{cfg.race_candidates, cfg.race_dump_ms, cfg.race_residency_ms, cfg.race_trials};
  const RaceProbability a = race_probability(p);
  const double mc = run_key_race(p, cfg.seed);
  RaceParams lo = p, hi = p;
  lo.dump_ms = 0.3;
  hi.dump_ms = 0.1;
  const double band_lo = race_probability(lo).p, band_hi = race_probability(hi).p;
  res.report["analytic"] = a.p;
  res.report["saturated"] = a.saturated;
  res.report["monte_carlo"] = mc;
  res.report["abs_error_pp"] = std::abs(mc - a.p) * 100;
  res.report["band_low"] = band_lo;
  res.report["band_high"] = band_hi;
  res.report["observed_4_4_in_band"] = band_lo <= 0.044 && 0.044 <= band_hi;
  res.ok = std::abs(mc - a.p) <= 0.005;
  res.report["ok"] = res.ok;
  res.latency_csv = "tick,ctx,op,latency\n";
  return res;
}

ScenarioResult run_fingerprint(const ScenarioConfig& cfg) {
  ScenarioResult res;
  res.report = base_report(cfg);
  const std::vector<std::string> names = {"family-a", "family-b", "family-c", "family-d"};
  std::vector<FamilySpec> fams;
  std::vector<WeightDump> bases;
  std::vector<LayerFingerprint> refs;
  for (std::size_t i = 0; i < names.size(); ++i) {
    fams.push_back(random_family(names[i], 24, cfg.seed * 31 + i));
    bases.push_back(sample_family(fams.back(), 4096, cfg.seed * 37 + i));
    refs.push_back(fingerprint(bases.back(), names[i]));
  }
  const StatNorm norm = corpus_norm(refs);
  json sims = json::array();
  std::uint32_t correct = 0, total = 0;
  double min_within = 1.0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    for (std::uint32_t v = 0; v < 3; ++v) {
      const WeightDump d = perturb(bases[i], 0.001, cfg.seed * 41 + i * 3 + v);
      const std::string got = identify(d, refs);
      const double s = similarity(fingerprint(d), refs[i], norm);
      min_within = std::min(min_within, s);
      correct += got == names[i];
      ++total;
      json j;
      j["family"] = names[i];
      j["variant"] = v;
      j["identified"] = got;
      j["similarity_to_base"] = s;
      sims.push_back(j);
    }
  }
  json cross = json::array();
  for (std::size_t i = 0; i < refs.size(); ++i)
    for (std::size_t k = i + 1; k < refs.size(); ++k) cross.push_back(similarity(refs[i], refs[k], norm));
  res.report["variants"] = sims;
  res.report["cross_family"] = cross;
  res.report["self_similarity"] = similarity(refs[0], refs[0], norm);
  res.report["min_within_family"] = min_within;
  res.report["top1_accuracy"] = static_cast<double>(correct) / total;
  res.ok = correct == total && min_within >= 0.97;
  res.report["ok"] = res.ok;
  res.latency_csv = "tick,ctx,op,latency\n";
  return res;
}

}  // namespace

ScenarioResult run_scenario(const ScenarioConfig& cfg) {
  if (cfg.scenario == "eq1-trace") return run_eq1(cfg);
  if (cfg.scenario == "massage-demo") return run_massage(cfg);
  if (cfg.scenario == "e2e-attack") return run_e2e(cfg, false);
  if (cfg.scenario == "host-privesc") return run_e2e(cfg, true);
  if (cfg.scenario == "code-tamper") return run_code_tamper(cfg);
  if (cfg.scenario == "key-race") return run_key_race_scenario(cfg);
  if (cfg.scenario == "fingerprint") return run_fingerprint(cfg);
  throw ConfigError("unknown scenario '" + cfg.scenario + "'");
}

ScenarioResult run_trials(const ScenarioConfig& cfg) {
  if (cfg.trials <= 1) return run_scenario(cfg);
  std::vector<ScenarioResult> out(cfg.trials);
  std::vector<std::string> errors(cfg.trials);
  std::atomic<std::uint32_t> next{0};
  auto worker = [&] {
    for (std::uint32_t i; (i = next++) < cfg.trials;) {
      ScenarioConfig c = cfg;
      c.seed = cfg.seed + i;
      c.trials = 1;
      try {
        out[i] = run_scenario(c);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::uint32_t j = 0; j < std::min(cfg.jobs, cfg.trials); ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  ScenarioResult agg;
  agg.report = base_report(cfg);
  json trials = json::array();
  std::uint32_t passed = 0;
  for (std::uint32_t i = 0; i < cfg.trials; ++i) {
    if (!errors[i].empty()) {
      json e;
      e["seed"] = cfg.seed + i;
      e["error"] = errors[i];
      e["ok"] = false;
      trials.push_back(e);
      continue;
    }
    passed += out[i].ok;
    trials.push_back(out[i].report);
    agg.extra["trial_" + std::to_string(cfg.seed + i) + "/report.json"] = out[i].report.dump(2) + "\n";
  }
  agg.report["trials"] = trials;
  agg.report["passed"] = passed;
  agg.ok = passed == cfg.trials;
  agg.report["ok"] = agg.ok;
  agg.latency_csv = out[0].latency_csv;
  agg.events_jsonl = out[0].events_jsonl;
  return agg;
}

void write_artifacts(const ScenarioResult& r, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto put = [&](const std::string& name, const std::string& body) {
    const fs::path p = fs::path(dir) / name;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    f << body;
  };
  put("report.json", r.report.dump(2) + "\n");
  put("latency.csv", r.latency_csv);
  put("events.jsonl", r.events_jsonl);
  for (const auto& [name, body] : r.extra) put(name, body);
}

}  // namespace rhsim
