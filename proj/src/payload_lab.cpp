// Copyright 2026 The rhsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include "rhsim/payload_lab.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rhsim {

// ------------------------------------------------------------------ CodeImage

CodeImage::CodeImage(std::uint32_t pages)
    : pages_(pages), bytes_(std::uint64_t{pages} * kCodePage, 0) {
  for (std::uint64_t s = 0; s < slots(); ++s) bytes_[s * kSlotBytes] = static_cast<std::uint8_t>(Opcode::nop);
}

std::uint64_t CodeImage::target(std::uint64_t slot) const {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[slot * kSlotBytes + 8 + i]} << (8 * i);
  return v;
}

void CodeImage::set(std::uint64_t slot, Opcode op, std::uint64_t target) {
  if (slot >= slots()) throw RangeError("slot outside the image");
  bytes_[slot * kSlotBytes] = static_cast<std::uint8_t>(op);
  for (int i = 0; i < 8; ++i)
    bytes_[slot * kSlotBytes + 8 + i] = static_cast<std::uint8_t>(target >> (8 * i));
}

std::vector<CodeImage::Kernel> CodeImage::kernels() const {
  std::vector<Kernel> out;
  const std::uint64_t n = slots();
  std::uint64_t s = 0;
  while (s < n) {
    if (opcode(s) == Opcode::nop) {
      ++s;
      continue;
    }
    const std::uint64_t first = s;
    std::uint64_t end = n;
    for (std::uint64_t t = s; t + 2 < n; ++t) {
      if (opcode(t) == Opcode::exit && opcode(t + 1) == Opcode::bra &&
          target(t + 1) == (t + 1) * kSlotBytes && opcode(t + 2) == Opcode::nop) {
        end = t + 2;
        while (end < n && opcode(end) == Opcode::nop) ++end;
        break;
      }
    }
    out.push_back({first, end, static_cast<std::uint32_t>(first * kSlotBytes / kCodePage)});
    s = end;
  }
  return out;
}

std::vector<std::uint64_t> CodeImage::branches(const Kernel& k) const {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = k.first_slot; s < k.end_slot; ++s)
    if (opcode(s) == Opcode::bra && target(s) != s * kSlotBytes) out.push_back(s);
  return out;
}

// ------------------------------------------------------------- AccuracyOracle

AccuracyOracle::AccuracyOracle(const CodeImage& pristine, double baseline,
                               std::vector<std::size_t> essential,
                               std::optional<std::size_t> critical_kernel,
                               std::optional<std::uint64_t> critical_branch)
    : kernels_(pristine.kernels()),
      baseline_(baseline),
      essential_(kernels_.size(), false),
      critical_kernel_(critical_kernel),
      critical_branch_(critical_branch) {
  for (std::size_t k : essential) essential_.at(k) = true;
}

OracleResult AccuracyOracle::run(const CodeImage& image) {
  ++runs_;
  OracleResult r;
  r.accuracy = baseline_;
  bool collapse = false;
  for (std::size_t i = 0; i < kernels_.size(); ++i) {
    if (image.opcode(kernels_[i].first_slot) != Opcode::exit) continue;
    if (critical_kernel_ && i == *critical_kernel_) {
      collapse = true;
    } else if (essential_[i]) {
      r.accuracy *= 0.97;
      r.latency *= 0.98;
    }
  }
  if (critical_branch_ && image.opcode(*critical_branch_) == Opcode::nop) {
    collapse = true;
    r.latency *= 1.02;
  }
  if (collapse) r.accuracy = 0.0011;
  return r;
}

CodeLab make_code_lab(const CodeLabParams& p) {
  std::mt19937_64 rng(p.seed);
  const std::uint32_t nk = p.pages * p.kernels_per_page;
  std::vector<std::uint32_t> per_kernel(nk, p.branches / nk);
  for (std::uint32_t i = 0; i < p.branches % nk; ++i) ++per_kernel[i];
  std::shuffle(per_kernel.begin(), per_kernel.end(), rng);

  CodeImage img(p.pages);
  std::uniform_int_distribution<int> gap(3, 11);
  std::size_t ki = 0;
  for (std::uint32_t pg = 0; pg < p.pages; ++pg) {
    std::uint64_t s = std::uint64_t{pg} * (kCodePage / kSlotBytes);
    for (std::uint32_t k = 0; k < p.kernels_per_page; ++k, ++ki) {
      const std::uint64_t first = s;
      img.set(s++, Opcode::other);
      std::vector<std::uint64_t> bras;
      for (std::uint32_t b = 0; b < per_kernel[ki]; ++b) {
        for (int g = gap(rng); g > 0; --g) img.set(s++, Opcode::other);
        bras.push_back(s++);
      }
      img.set(s++, Opcode::other);
      const std::uint64_t body_end = s;
      for (std::uint64_t b : bras) {
        std::uniform_int_distribution<std::uint64_t> tgt(first, body_end - 1);
        std::uint64_t t = tgt(rng);
        if (t == b) t = first;
        img.set(b, Opcode::bra, t * kSlotBytes);
      }
      img.set(s++, Opcode::exit);
      img.set(s, Opcode::bra, s * kSlotBytes);
      ++s;
      img.set(s++, Opcode::nop);
      while (s % 8 != 0) img.set(s++, Opcode::nop);
    }
  }

  const auto kernels = img.kernels();
  std::vector<std::uint32_t> page_ids(p.pages);
  std::iota(page_ids.begin(), page_ids.end(), 0);
  std::shuffle(page_ids.begin(), page_ids.end(), rng);
  page_ids.resize(std::min(p.essential_pages, p.pages));
  std::vector<std::size_t> essential;
  for (std::size_t i = 0; i < kernels.size(); ++i)
    if (std::find(page_ids.begin(), page_ids.end(), kernels[i].page) != page_ids.end())
      essential.push_back(i);

  std::optional<std::size_t> ck;
  std::optional<std::uint64_t> cb;
  if (p.plant && !essential.empty()) {
    ck = essential[std::uniform_int_distribution<std::size_t>(0, essential.size() - 1)(rng)];
    const auto br = img.branches(kernels[*ck]);
    cb = br[std::uniform_int_distribution<std::size_t>(0, br.size() - 1)(rng)];
  }
  const double baseline = std::uniform_real_distribution<double>(0.5668, 0.8028)(rng);
  AccuracyOracle oracle(img, baseline, essential, ck, cb);
  std::uint64_t total = 0;
  for (const auto& k : kernels) total += img.branches(k).size();
  return {std::move(img), std::move(oracle), total};
}

bool degraded_ok(const OracleResult& r, double threshold) {
  return !r.crashed && r.valid_output && r.accuracy <= threshold &&
         std::abs(r.latency - 1.0) <= 0.10;
}

PipelineResult filter_pipeline(CodeImage& image, AccuracyOracle& oracle, std::uint32_t budget) {
  PipelineResult res;
  const std::uint32_t start = oracle.runs();
  auto spent = [&] { return oracle.runs() - start; };
  auto run = [&]() -> std::optional<OracleResult> {
    if (spent() >= budget) return std::nullopt;
    return oracle.run(image);
  };
  // Applies `op` to every slot in `slots`, runs once, then restores.
  auto trial = [&](const std::vector<std::uint64_t>& slots, Opcode op) -> std::optional<OracleResult> {
    std::vector<std::pair<Opcode, std::uint64_t>> saved;
    for (std::uint64_t s : slots) {
      saved.emplace_back(image.opcode(s), image.target(s));
      image.set(s, op, op == Opcode::nop ? 0 : image.target(s));
    }
    auto r = run();
    for (std::size_t i = 0; i < slots.size(); ++i) image.set(slots[i], saved[i].first, saved[i].second);
    return r;
  };

  const auto kernels = image.kernels();
  auto base = run();
  if (!base) return res;
  const double thr = 0.002;

  // Stage 1: silence whole pages.
  std::vector<std::size_t> alive;
  std::uint64_t total_br = 0, kept_br = 0;
  for (const auto& k : kernels) total_br += image.branches(k).size();
  for (std::uint32_t pg = 0; pg < image.pages(); ++pg) {
    std::vector<std::uint64_t> firsts;
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < kernels.size(); ++i)
      if (kernels[i].page == pg) {
        firsts.push_back(kernels[i].first_slot);
        ids.push_back(i);
      }
    if (firsts.empty()) continue;
    auto r = trial(firsts, Opcode::exit);
    if (!r) {
      res.runs_used = spent();
      return res;
    }
    if (r->accuracy == base->accuracy) continue;
    ++res.pages_kept;
    for (std::size_t i : ids) {
      alive.push_back(i);
      kept_br += image.branches(kernels[i]).size();
    }
  }
  res.survivor_fraction = total_br ? static_cast<double>(kept_br) / total_br : 0;

  // Halves `items` until one remains whose tampering collapses accuracy.
  auto bisect = [&](std::vector<std::uint64_t> items, Opcode op,
                    auto slots_of) -> std::optional<std::uint64_t> {
    while (items.size() > 1) {
      const std::size_t h = items.size() / 2;
      std::vector<std::uint64_t> a(items.begin(), items.begin() + h), b(items.begin() + h, items.end());
      auto ra = trial(slots_of(a), op);
      if (!ra) return std::nullopt;
      if (ra->accuracy <= thr) {
        items = std::move(a);
        continue;
      }
      auto rb = trial(slots_of(b), op);
      if (!rb || rb->accuracy > thr) return std::nullopt;
      items = std::move(b);
    }
    if (items.empty()) return std::nullopt;
    return items.front();
  };

  // Stage 2: kernels.
  std::vector<std::uint64_t> kids(alive.begin(), alive.end());
  auto kernel = bisect(kids, Opcode::exit, [&](const std::vector<std::uint64_t>& ks) {
    std::vector<std::uint64_t> f;
    for (std::uint64_t k : ks) f.push_back(kernels[k].first_slot);
    return f;
  });
  if (!kernel) {
    res.runs_used = spent();
    return res;
  }

  // Stage 3: branches of the surviving kernel.
  auto branch = bisect(image.branches(kernels[*kernel]), Opcode::nop,
                       [](const std::vector<std::uint64_t>& bs) { return bs; });
  if (!branch) {
    res.runs_used = spent();
    return res;
  }
  auto fin = trial({*branch}, Opcode::nop);
  res.runs_used = spent();
  if (!fin) return res;
  res.final_run = *fin;
  res.found = degraded_ok(*fin, thr);
  res.critical_branch = *branch;
  return res;
}

// ------------------------------------------------------------------ key race

std::vector<std::uint64_t> find_candidates(std::span<const std::uint8_t> snapshot,
                                           std::uint8_t prefill, std::uint64_t page_size) {
  if (prefill == 0) throw DomainError("zero prefill cannot be told apart from freed pages");
  if (page_size == 0) throw DomainError("page size must be positive");
  std::vector<std::uint64_t> out;
  for (std::uint64_t p = 0; (p + 1) * page_size <= snapshot.size(); ++p) {
    auto page = snapshot.subspan(p * page_size, page_size);
    if (std::all_of(page.begin(), page.end(), [](std::uint8_t b) { return b == 0; })) out.push_back(p);
  }
  return out;
}

RaceProbability race_probability(const RaceParams& p) {
  if (p.candidates == 0 || p.dump_ms <= 0 || p.residency_ms < 0)
    throw DomainError("race parameters must be positive");
  const double cycle = p.candidates * p.dump_ms;
  if (cycle <= p.residency_ms) return {1.0, true};
  return {std::min(1.0, (p.residency_ms + p.dump_ms) / cycle), false};
}

double run_key_race(const RaceParams& p, std::uint64_t seed) {
  if (p.candidates == 0 || p.dump_ms <= 0 || p.trials == 0)
    throw DomainError("race parameters must be positive");
  std::mt19937_64 rng(seed);
  const double cycle = p.candidates * p.dump_ms;
  std::uniform_real_distribution<double> phase(0, cycle);
  std::uniform_int_distribution<std::uint32_t> page(0, p.candidates - 1);
  std::uint64_t hits = 0;
  for (std::uint64_t t = 0; t < p.trials; ++t) {
    const double t0 = phase(rng);
    const double a = page(rng) * p.dump_ms;
    // Dump of the key page starts inside the residency, or residency
    // starts while the page is being dumped.
    const double since_res = std::fmod(a - t0 + cycle, cycle);
    const double since_dump = std::fmod(t0 - a + cycle, cycle);
    if (since_res < p.residency_ms || since_dump < p.dump_ms) ++hits;
  }
  return static_cast<double>(hits) / p.trials;
}

// ---------------------------------------------------------------- fingerprint

LayerFingerprint fingerprint(const WeightDump& dump, std::string label) {
  LayerFingerprint f;
  f.label = std::move(label);
  for (const auto& layer : dump) {
    LayerStats s;
    if (!layer.empty()) {
      double sum = 0, zeros = 0;
      for (float w : layer) {
        sum += w;
        zeros += w == 0.0f;
      }
      s.mean = sum / layer.size();
      double var = 0;
      for (float w : layer) var += (w - s.mean) * (w - s.mean);
      s.stddev = std::sqrt(var / layer.size());
      s.zero_fraction = zeros / layer.size();
    }
    f.layers.push_back(s);
  }
  return f;
}

namespace {
std::array<double, 3> stat_array(const LayerStats& s) { return {s.mean, s.stddev, s.zero_fraction}; }
}  // namespace

StatNorm corpus_norm(std::span<const LayerFingerprint> refs) {
  StatNorm n;
  std::array<double, 3> sum{}, sq{};
  std::size_t cnt = 0;
  for (const auto& r : refs)
    for (const auto& l : r.layers) {
      const auto a = stat_array(l);
      for (int i = 0; i < 3; ++i) {
        sum[i] += a[i];
        sq[i] += a[i] * a[i];
      }
      ++cnt;
    }
  if (cnt == 0) return n;
  for (int i = 0; i < 3; ++i) {
    n.mean[i] = sum[i] / cnt;
    const double var = std::max(0.0, sq[i] / cnt - n.mean[i] * n.mean[i]);
    n.scale[i] = var > 0 ? std::sqrt(var) : 1.0;
  }
  return n;
}

std::vector<double> normalized_vector(const LayerFingerprint& f, const StatNorm& n) {
  std::vector<double> v;
  v.reserve(f.layers.size() * 3);
  for (const auto& l : f.layers) {
    const auto a = stat_array(l);
    for (int i = 0; i < 3; ++i) v.push_back((a[i] - n.mean[i]) / n.scale[i]);
  }
  return v;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("vectors differ in length");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) return 0;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double similarity(const LayerFingerprint& a, const LayerFingerprint& b, const StatNorm& n) {
  if (a.layers.size() != b.layers.size()) throw DomainError("layer layouts do not align");
  return cosine(normalized_vector(a, n), normalized_vector(b, n));
}

std::string identify(const WeightDump& dump, std::span<const LayerFingerprint> refs) {
  if (refs.empty()) throw DomainError("no reference fingerprints");
  const LayerFingerprint f = fingerprint(dump);
  const StatNorm n = corpus_norm(refs);
  double best = -2;
  std::string label;
  for (const auto& r : refs) {
    const double s = similarity(f, r, n);
    if (s > best) {
      best = s;
      label = r.label;
    }
  }
  return label;
}

FamilySpec random_family(std::string label, std::uint32_t layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mean(-0.05, 0.05), sd(0.01, 0.2), zf(0.0, 0.5);
  FamilySpec f{std::move(label), {}};
  for (std::uint32_t i = 0; i < layers; ++i) f.layer_params.push_back({mean(rng), sd(rng), zf(rng)});
  return f;
}

WeightDump sample_family(const FamilySpec& f, std::uint32_t per_layer, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightDump d;
  for (const auto& [m, s, z] : f.layer_params) {
    std::normal_distribution<double> w(m, s);
    std::bernoulli_distribution zero(z);
    std::vector<float> layer(per_layer);
    for (float& x : layer) x = zero(rng) ? 0.0f : static_cast<float>(w(rng));
    d.push_back(std::move(layer));
  }
  return d;
}

WeightDump perturb(const WeightDump& d, double rel, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  WeightDump out = d;
  for (auto& layer : out)
    for (float& x : layer) x = static_cast<float>(x * (1.0 + rel * n(rng)));
  return out;
}

}  // namespace rhsim
