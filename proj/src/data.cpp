#include "dimae/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

#include "dimae/errors.hpp"
#include "dimae/png_io.hpp"
#include "dimae/rng.hpp"

namespace fs = std::filesystem;

namespace dimae::data {

DomainRegistry::DomainRegistry(std::vector<std::string> names) : names_(std::move(names)) {
  std::set<std::string> seen;
  for (const auto& n : names_) {
    require(!n.empty(), "domain names must be non-empty");
    require(seen.insert(n).second, "duplicate domain name " + n);
  }
}

DomainRegistry DomainRegistry::from_directory(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) names.push_back(entry.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  return DomainRegistry(std::move(names));
}

const std::string& DomainRegistry::name(DomainId id) const {
  require(id >= 0 && id < size(), "domain id out of range");
  return names_[id];
}

std::optional<DomainId> DomainRegistry::find(std::string_view name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<DomainId>(it - names_.begin());
}

DomainId DomainRegistry::id(std::string_view name) const {
  auto found = find(name);
  require(found.has_value(), "unknown domain '" + std::string(name) + "'");
  return *found;
}

std::vector<std::size_t> Dataset::indices_of(DomainId domain) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].domain == domain) out.push_back(i);
  }
  return out;
}

namespace {

std::vector<fs::path> sorted_children(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (directories ? entry.is_directory() : entry.is_regular_file()) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool is_png(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png";
}

}  // namespace

Dataset load_folder(const fs::path& root, const DomainRegistry& registry) {
  if (!fs::is_directory(root)) throw IoError("dataset root is not a directory: " + root.string());
  Dataset ds;
  ds.registry = registry;
  std::set<std::string> class_set;
  const auto domain_dirs = sorted_children(root, true);
  for (const auto& d : domain_dirs) {
    const auto name = d.filename().string();
    require(registry.find(name).has_value(), "unknown domain directory '" + name + "' under " + root.string());
    for (const auto& c : sorted_children(d, true)) class_set.insert(c.filename().string());
  }
  ds.class_names.assign(class_set.begin(), class_set.end());

  for (const auto& d : domain_dirs) {
    const DomainId domain = registry.id(d.filename().string());
    for (const auto& c : sorted_children(d, true)) {
      const auto label = static_cast<int>(
          std::lower_bound(ds.class_names.begin(), ds.class_names.end(), c.filename().string()) - ds.class_names.begin());
      for (const auto& f : sorted_children(c, false)) {
        if (!is_png(f)) continue;
        Sample s;
        s.image = io::read_png(f);
        s.image.domain = domain;
        s.domain = domain;
        s.label = label;
        s.path = f.string();
        ds.samples.push_back(std::move(s));
      }
    }
  }
  // Samples are grouped by domain in registry order regardless of directory order.
  std::stable_sort(ds.samples.begin(), ds.samples.end(),
                   [](const Sample& a, const Sample& b) { return a.domain < b.domain; });
  return ds;
}

Dataset load_folder(const fs::path& root) { return load_folder(root, DomainRegistry::from_directory(root)); }

void save_folder(const Dataset& dataset, const fs::path& root) {
  std::map<std::pair<int, int>, int> counters;
  for (const auto& s : dataset.samples) {
    const auto& cls = s.label >= 0 ? dataset.class_names.at(s.label) : std::string("unlabeled");
    int idx = counters[{s.domain, s.label}]++;
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.png", idx);
    io::write_png(root / dataset.registry.name(s.domain) / cls / name, s.image);
  }
}

Dataset select_domains(const Dataset& dataset, const std::vector<std::string>& names) {
  Dataset out;
  out.registry = DomainRegistry(names);
  out.class_names = dataset.class_names;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const DomainId old_id = dataset.registry.id(names[k]);
    for (const auto& s : dataset.samples) {
      if (s.domain != old_id) continue;
      Sample copy = s;
      copy.domain = static_cast<DomainId>(k);
      copy.image.domain = copy.domain;
      out.samples.push_back(std::move(copy));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

constexpr int kSupersample = 4;

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"disk",  "square", "triangle", "plus",     "ring",   "diamond",
                                              "frame", "xcross", "tee",      "halfdisk", "ellipse", "ell",
                                              "bar",   "crescent"};
  return names;
}

const std::vector<std::string>& style_names() {
  static const std::vector<std::string> names{"solid",    "stripes", "sketch",  "checker",
                                              "noise",    "gradient", "outline", "hatch"};
  return names;
}

// (u, v) are shape-local coordinates scaled so the shape roughly fills [-1, 1]^2.
bool inside_shape(int shape, double u, double v) {
  const double r = std::hypot(u, v);
  const double au = std::abs(u);
  const double av = std::abs(v);
  switch (shape) {
    case 0: return r <= 0.95;
    case 1: return std::max(au, av) <= 0.8;
    case 2: return v <= 0.75 && v >= -0.9 && au <= 0.95 * (v + 0.9) / 1.65;
    case 3: return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
    case 4: return r <= 0.95 && r >= 0.55;
    case 5: return au + av <= 1.0;
    case 6: return std::max(au, av) <= 0.85 && std::max(au, av) >= 0.5;
    case 7: {
      const double p = (u + v) * std::numbers::sqrt2 / 2.0;
      const double q = (u - v) * std::numbers::sqrt2 / 2.0;
      return (std::abs(p) <= 0.28 && std::abs(q) <= 1.0) || (std::abs(q) <= 0.28 && std::abs(p) <= 1.0);
    }
    case 8: return (std::abs(v + 0.65) <= 0.25 && au <= 0.9) || (au <= 0.25 && v >= -0.9 && v <= 0.9);
    case 9: return r <= 0.95 && v >= -0.1;
    case 10: return (u * u) / 0.95 + (v * v) / 0.3 <= 1.0;
    case 11: return (u >= -0.8 && u <= -0.3 && av <= 0.9) || (v >= 0.4 && v <= 0.9 && u >= -0.8 && u <= 0.8);
    case 12: return au <= 0.95 && av <= 0.3;
    case 13: return r <= 0.95 && std::hypot(u - 0.4, v) >= 0.7;
    default: return false;
  }
}

struct Color {
  double r, g, b;
  double operator[](int c) const { return c == 0 ? r : (c == 1 ? g : b); }
};

Color hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

Color random_saturated(Rng& rng) { return hsv(rng.uniform(), rng.uniform(0.6, 1.0), rng.uniform(0.45, 0.95)); }

struct Geometry {
  std::vector<double> fill;  // coverage in [0, 1], H x W
  std::vector<double> edge;  // outline coverage in [0, 1]
};

Geometry render_geometry(int shape, int size, Rng& rng) {
  const double cx = size / 2.0 + rng.uniform(-0.1, 0.1) * size;
  const double cy = size / 2.0 + rng.uniform(-0.1, 0.1) * size;
  const double radius = rng.uniform(0.28, 0.38) * size;
  const double angle = rng.uniform(-0.25, 0.25);
  const double ca = std::cos(angle), sa = std::sin(angle);

  const int hi = size * kSupersample;
  std::vector<char> mask(static_cast<std::size_t>(hi) * hi);
  for (int y = 0; y < hi; ++y) {
    for (int x = 0; x < hi; ++x) {
      const double px = (x + 0.5) / kSupersample - cx;
      const double py = (y + 0.5) / kSupersample - cy;
      const double u = (ca * px + sa * py) / radius;
      const double v = (-sa * px + ca * py) / radius;
      mask[static_cast<std::size_t>(y) * hi + x] = inside_shape(shape, u, v);
    }
  }
  // Outline: supersampled pixels within `band` of a pixel with the other label.
  const int band = kSupersample / 2 + 1;
  std::vector<char> edge(mask.size(), 0);
  for (int y = 0; y < hi; ++y) {
    for (int x = 0; x < hi; ++x) {
      const char m = mask[static_cast<std::size_t>(y) * hi + x];
      bool boundary = false;
      for (int dy = -band; dy <= band && !boundary; ++dy) {
        for (int dx = -band; dx <= band && !boundary; ++dx) {
          const int yy = std::clamp(y + dy, 0, hi - 1);
          const int xx = std::clamp(x + dx, 0, hi - 1);
          boundary = mask[static_cast<std::size_t>(yy) * hi + xx] != m;
        }
      }
      edge[static_cast<std::size_t>(y) * hi + x] = boundary && m;
    }
  }
  Geometry g;
  g.fill.assign(static_cast<std::size_t>(size) * size, 0.0);
  g.edge.assign(g.fill.size(), 0.0);
  const double norm = 1.0 / (kSupersample * kSupersample);
  for (int y = 0; y < hi; ++y) {
    for (int x = 0; x < hi; ++x) {
      const auto dst = static_cast<std::size_t>(y / kSupersample) * size + x / kSupersample;
      g.fill[dst] += mask[static_cast<std::size_t>(y) * hi + x] * norm;
      g.edge[dst] += edge[static_cast<std::size_t>(y) * hi + x] * norm;
    }
  }
  for (auto& e : g.edge) e = std::min(1.0, 2.0 * e);
  return g;
}

double stripe(int x, int y, int period, int orientation) {
  int t = 0;
  switch (orientation) {
    case 0: t = x; break;
    case 1: t = y; break;
    case 2: t = x + y; break;
    default: t = x - y + 4 * period; break;
  }
  return ((t % (2 * period) + 2 * period) % (2 * period)) < period ? 1.0 : 0.0;
}

ImageTensor render_style(const std::string& style, const Geometry& g, int size, Rng& rng) {
  ImageTensor img(3, size, size);
  auto put = [&](int y, int x, const Color& c) {
    for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch];
  };
  auto lerp = [](const Color& a, const Color& b, double t) {
    return Color{a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
  };
  auto at = [&](const std::vector<double>& m, int y, int x) { return m[static_cast<std::size_t>(y) * size + x]; };

  if (style == "solid") {
    const Color bg = hsv(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.75, 1.0));
    const Color fg = random_saturated(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(y, x, lerp(bg, fg, at(g.fill, y, x)));
  } else if (style == "stripes") {
    const Color bg_a = random_saturated(rng), bg_b = random_saturated(rng);
    const Color fg_a = random_saturated(rng), fg_b = random_saturated(rng);
    const int bg_period = rng.uniform_int(1, 2), fg_period = rng.uniform_int(1, 2);
    const int bg_orient = rng.uniform_int(0, 3);
    const int fg_orient = (bg_orient + rng.uniform_int(1, 3)) % 4;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Color bg = lerp(bg_a, bg_b, stripe(x, y, bg_period, bg_orient));
        const Color fg = lerp(fg_a, fg_b, stripe(x, y, fg_period, fg_orient));
        put(y, x, lerp(bg, fg, at(g.fill, y, x)));
      }
    }
  } else if (style == "sketch") {
    const double paper = rng.uniform(0.88, 1.0);
    const double ink = rng.uniform(0.0, 0.25);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double v = paper + (ink - paper) * at(g.edge, y, x) + rng.uniform(-0.03, 0.03);
        put(y, x, Color{v, v, v});
      }
    }
  } else if (style == "checker") {
    const Color a = random_saturated(rng), b = random_saturated(rng);
    const Color fg = random_saturated(rng);
    const int cell = rng.uniform_int(2, 3);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Color bg = ((x / cell + y / cell) % 2) ? a : b;
        put(y, x, lerp(bg, fg, at(g.fill, y, x)));
      }
    }
  } else if (style == "noise") {
    const Color fg = random_saturated(rng);
    const double level = rng.uniform(0.3, 0.7);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Color bg{level + rng.uniform(-0.3, 0.3), level + rng.uniform(-0.3, 0.3), level + rng.uniform(-0.3, 0.3)};
        put(y, x, lerp(bg, fg, at(g.fill, y, x)));
      }
    }
  } else if (style == "gradient") {
    const Color top = random_saturated(rng), bottom = random_saturated(rng);
    const Color light = hsv(rng.uniform(), rng.uniform(0.2, 0.6), 1.0);
    const Color dark = hsv(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.15, 0.4));
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Color bg = lerp(top, bottom, static_cast<double>(y) / (size - 1));
        const Color fg = lerp(light, dark, static_cast<double>(x + y) / (2.0 * (size - 1)));
        put(y, x, lerp(bg, fg, at(g.fill, y, x)));
      }
    }
  } else if (style == "outline") {
    // Flat fill plus a dark contour: solid and sketch cues combined.
    const Color bg = hsv(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.75, 1.0));
    const Color fg = random_saturated(rng);
    const Color ink{rng.uniform(0.0, 0.2), rng.uniform(0.0, 0.2), rng.uniform(0.0, 0.2)};
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) put(y, x, lerp(lerp(bg, fg, at(g.fill, y, x)), ink, at(g.edge, y, x)));
  } else if (style == "hatch") {
    // Striped interior on plain paper with a dark contour: stripes and sketch combined.
    const double paper = rng.uniform(0.88, 1.0);
    const Color a = random_saturated(rng), b = random_saturated(rng);
    const int period = rng.uniform_int(1, 2), orient = rng.uniform_int(0, 3);
    const double ink = rng.uniform(0.0, 0.25);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const Color fill = lerp(a, b, stripe(x, y, period, orient));
        const Color base = lerp(Color{paper, paper, paper}, fill, at(g.fill, y, x));
        put(y, x, lerp(base, Color{ink, ink, ink}, at(g.edge, y, x)));
      }
    }
  } else {
    throw ValidationError("unknown synthetic style '" + style + "'");
  }
  // 8-bit quantization so PNG storage is lossless.
  for (double& v : img.data()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

}  // namespace

std::vector<std::string> synthetic_styles() { return style_names(); }
std::vector<std::string> synthetic_shapes() { return shape_names(); }

void SyntheticSpec::validate() const {
  require(num_classes >= 2 && num_classes <= static_cast<int>(shape_names().size()),
          "num_classes must be in [2, " + std::to_string(shape_names().size()) + "]");
  require(image_size >= 8, "image_size must be at least 8");
  require(!domains.empty(), "synthetic spec needs at least one domain");
  require(samples_per_class_per_domain >= 1, "samples_per_class_per_domain must be positive");
  for (const auto& d : domains) {
    require(std::find(style_names().begin(), style_names().end(), d) != style_names().end(),
            "unknown synthetic style '" + d + "'");
  }
  DomainRegistry check(domains);  // rejects duplicates
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"num_classes", s.num_classes},
       {"image_size", s.image_size},
       {"domains", s.domains},
       {"samples_per_class_per_domain", s.samples_per_class_per_domain},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  s.num_classes = j.value("num_classes", s.num_classes);
  s.image_size = j.value("image_size", s.image_size);
  s.domains = j.value("domains", s.domains);
  s.samples_per_class_per_domain = j.value("samples_per_class_per_domain", s.samples_per_class_per_domain);
  s.seed = j.value("seed", s.seed);
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.registry = DomainRegistry(spec.domains);
  ds.class_names.assign(shape_names().begin(), shape_names().begin() + spec.num_classes);
  for (int d = 0; d < static_cast<int>(spec.domains.size()); ++d) {
    for (int c = 0; c < spec.num_classes; ++c) {
      for (int k = 0; k < spec.samples_per_class_per_domain; ++k) {
        // Geometry depends on (class, k) only, so every domain renders the same shapes.
        Rng geo_rng(derive_seed(spec.seed, "synthetic.geometry", {static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(k)}));
        Rng style_rng(derive_seed(spec.seed, "synthetic.style",
                                  {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(k)}));
        Geometry g = render_geometry(c, spec.image_size, geo_rng);
        Sample s;
        s.image = render_style(spec.domains[d], g, spec.image_size, style_rng);
        s.domain = d;
        s.image.domain = d;
        s.label = c;
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

std::vector<std::vector<std::size_t>> stratified_batches(const Dataset& dataset, int batch_per_domain,
                                                         std::uint64_t seed) {
  require(batch_per_domain >= 1, "batch_per_domain must be positive");
  const int nd = dataset.registry.size();
  require(nd >= 1, "dataset has no domains");
  std::vector<std::vector<std::size_t>> pools(nd);
  std::size_t min_size = SIZE_MAX;
  for (int d = 0; d < nd; ++d) {
    pools[d] = dataset.indices_of(d);
    require(!pools[d].empty(), "domain '" + dataset.registry.name(d) + "' has no samples");
    Rng rng(derive_seed(seed, "batches", {static_cast<std::uint64_t>(d)}));
    rng.shuffle(pools[d].begin(), pools[d].end());
    min_size = std::min(min_size, pools[d].size());
  }
  const std::size_t num_batches = (min_size + batch_per_domain - 1) / batch_per_domain;
  std::vector<std::vector<std::size_t>> batches(num_batches);
  for (std::size_t b = 0; b < num_batches; ++b) {
    for (int d = 0; d < nd; ++d) {
      for (int k = 0; k < batch_per_domain; ++k) {
        batches[b].push_back(pools[d][(b * batch_per_domain + k) % pools[d].size()]);
      }
    }
  }
  return batches;
}

}  // namespace dimae::data
