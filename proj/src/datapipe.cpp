#include "norm3d/datapipe.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "norm3d/errors.hpp"
#include "norm3d/objective.hpp"
#include "norm3d/rng.hpp"

namespace norm3d {

namespace {

struct Ellipsoid {
  double cs, cy, cx;  // center
  double rs, ry, rx;  // radii
};

bool inside(const Ellipsoid& e, double s, double y, double x) {
  const double a = (s - e.cs) / e.rs;
  const double b = (y - e.cy) / e.ry;
  const double c = (x - e.cx) / e.rx;
  return a * a + b * b + c * c <= 1.0;
}

}  // namespace

Volume generate_synthetic(const SynthSpec& spec) {
  if (spec.slices < 16 || spec.height < 16 || spec.width < 16) {
    throw ConfigError("generate_synthetic: extents must be at least (16,16,16)");
  }
  if (spec.ellipsoids == 0) {
    throw ConfigError("generate_synthetic: ellipsoid count must be >= 1");
  }
  if (spec.radius_min <= 0.0 || spec.radius_max < spec.radius_min) {
    throw ConfigError("generate_synthetic: degenerate radius range");
  }

  Rng rng(spec.seed);
  const double S = static_cast<double>(spec.slices);
  const double H = static_cast<double>(spec.height);
  const double W = static_cast<double>(spec.width);

  // Ellipsoid centers are spread along the slice axis; the tube sways
  // around the slice center with a seeded phase.
  const double phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<Ellipsoid> shapes;
  shapes.reserve(spec.ellipsoids);
  for (std::size_t i = 0; i < spec.ellipsoids; ++i) {
    const double t = (static_cast<double>(i) + 0.5) /
                     static_cast<double>(spec.ellipsoids);
    const double r = rng.uniform(spec.radius_min, spec.radius_max);
    Ellipsoid e;
    e.cs = t * S;
    e.cy = H / 2.0 + spec.wobble * H *
                         std::sin(2.0 * std::numbers::pi * t + phase_y);
    e.cx = W / 2.0 + spec.wobble * W *
                         std::cos(2.0 * std::numbers::pi * t + phase_x);
    e.rs = r;
    e.ry = r;
    e.rx = r;
    shapes.push_back(e);
  }

  const double base = rng.uniform(spec.base_min, spec.base_max);
  const double contrast = rng.uniform(spec.contrast_min, spec.contrast_max);

  Volume vol;
  vol.intensities = Grid3(spec.slices, spec.height, spec.width);
  vol.mask = Grid3(spec.slices, spec.height, spec.width);

  std::size_t foreground = 0;
  for (std::size_t s = 0; s < spec.slices; ++s) {
    for (std::size_t y = 0; y < spec.height; ++y) {
      for (std::size_t x = 0; x < spec.width; ++x) {
        const double sc = static_cast<double>(s) + 0.5;
        const double yc = static_cast<double>(y) + 0.5;
        const double xc = static_cast<double>(x) + 0.5;
        bool fg = false;
        for (const Ellipsoid& e : shapes) {
          if (inside(e, sc, yc, xc)) {
            fg = true;
            break;
          }
        }
        // Base texture: a gentle deterministic gradient across the slice.
        double v = base + 0.05 * (yc / H - 0.5) + 0.05 * (xc / W - 0.5);
        if (fg) v += contrast;
        v += spec.noise * rng.normal();
        vol.intensities.at(s, y, x) = std::clamp(v, 0.0, 1.0);
        vol.mask.at(s, y, x) = fg ? 1.0 : 0.0;
        foreground += fg;
      }
    }
  }

  const double fraction =
      static_cast<double>(foreground) / static_cast<double>(vol.mask.size());
  if (foreground == 0 || fraction < 0.01 || fraction > 0.5) {
    throw ConfigError(
        "generate_synthetic: foreground fraction " + std::to_string(fraction) +
        " outside [0.01, 0.5]; adjust radii or extents");
  }
  return vol;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("manifest: expected key=value, got '" + line + "'");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get_size = [&](const char* key, std::size_t fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback
                          : static_cast<std::size_t>(std::stoull(it->second));
  };
  auto get_real = [&](const char* key, double fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
  };
  m.volumes = get_size("volumes", m.volumes);
  m.proto.slices = get_size("slices", m.proto.slices);
  m.proto.height = get_size("height", m.proto.height);
  m.proto.width = get_size("width", m.proto.width);
  m.proto.ellipsoids = get_size("ellipsoids", m.proto.ellipsoids);
  m.proto.seed = get_size("seed", m.proto.seed);
  m.proto.radius_min = get_real("radius_min", m.proto.radius_min);
  m.proto.radius_max = get_real("radius_max", m.proto.radius_max);
  m.proto.wobble = get_real("wobble", m.proto.wobble);
  m.proto.noise = get_real("noise", m.proto.noise);
  m.proto.base_min = get_real("base_min", m.proto.base_min);
  m.proto.base_max = get_real("base_max", m.proto.base_max);
  m.proto.contrast_min = get_real("contrast_min", m.proto.contrast_min);
  m.proto.contrast_max = get_real("contrast_max", m.proto.contrast_max);
  return m;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str());
}

std::string manifest_to_text(const DatasetManifest& m) {
  std::ostringstream out;
  out << "volumes = " << m.volumes << "\n";
  out << "slices = " << m.proto.slices << "\n";
  out << "height = " << m.proto.height << "\n";
  out << "width = " << m.proto.width << "\n";
  out << "ellipsoids = " << m.proto.ellipsoids << "\n";
  out << "radius_min = " << m.proto.radius_min << "\n";
  out << "radius_max = " << m.proto.radius_max << "\n";
  out << "wobble = " << m.proto.wobble << "\n";
  out << "noise = " << m.proto.noise << "\n";
  out << "base_min = " << m.proto.base_min << "\n";
  out << "base_max = " << m.proto.base_max << "\n";
  out << "contrast_min = " << m.proto.contrast_min << "\n";
  out << "contrast_max = " << m.proto.contrast_max << "\n";
  out << "seed = " << m.proto.seed << "\n";
  return out.str();
}

std::vector<Volume> generate_dataset(const DatasetManifest& manifest) {
  std::vector<Volume> out;
  out.reserve(manifest.volumes);
  for (std::size_t i = 0; i < manifest.volumes; ++i) {
    SynthSpec s = manifest.proto;
    s.seed = mix_seed(manifest.proto.seed, i);
    out.push_back(generate_synthetic(s));
  }
  return out;
}

void rescale_to_unit(Grid3& grid) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (double v : grid.values) {
    if (std::isnan(v)) throw DataError("rescale_to_unit: NaN in input grid");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) {
    std::fill(grid.values.begin(), grid.values.end(), 0.0);
    return;
  }
  const double inv = 1.0 / (hi - lo);
  for (double& v : grid.values) v = (v - lo) * inv;
}

namespace {

struct NrrdHeader {
  std::size_t dimension = 0;
  std::vector<std::size_t> sizes;
  std::string type;
  std::string encoding;
  std::string endian;
};

std::vector<unsigned char> gz_inflate(const std::vector<unsigned char>& in,
                                      std::size_t expected) {
  std::vector<unsigned char> out(expected);
  z_stream zs;
  std::memset(&zs, 0, sizeof(zs));
  // 15 + 32: accept both zlib and gzip wrappers.
  if (inflateInit2(&zs, 15 + 32) != Z_OK) {
    throw DataError("nrrd: zlib initialization failed");
  }
  zs.next_in = const_cast<unsigned char*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) {
    throw FormatError("nrrd: gzip payload did not decode to the expected size");
  }
  return out;
}

template <typename T>
void decode_values(const std::vector<unsigned char>& bytes, Grid3& grid) {
  const std::size_t count = grid.size();
  if (bytes.size() < count * sizeof(T)) {
    throw FormatError("nrrd: data section shorter than sizes imply");
  }
  for (std::size_t i = 0; i < count; ++i) {
    T v;
    std::memcpy(&v, bytes.data() + i * sizeof(T), sizeof(T));
    grid.values[i] = static_cast<double>(v);
  }
}

}  // namespace

Volume read_nrrd(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("nrrd: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw FormatError("nrrd: empty file");
  if (line.size() > 0 && line.back() == '\r') line.pop_back();
  if (line.rfind("NRRD", 0) != 0) {
    throw FormatError("nrrd: missing NRRD magic line");
  }

  NrrdHeader hdr;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;  // end of attached header
    if (line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;  // key[:=]value variants
    std::string key = trim(line.substr(0, colon));
    std::string value = trim(line.substr(colon + 1));
    if (!value.empty() && value[0] == '=') value = trim(value.substr(1));
    std::transform(key.begin(), key.end(), key.begin(),
                   [](unsigned char ch) { return std::tolower(ch); });
    if (key == "dimension") {
      hdr.dimension = static_cast<std::size_t>(std::stoull(value));
    } else if (key == "sizes") {
      std::istringstream vs(value);
      std::size_t v;
      while (vs >> v) hdr.sizes.push_back(v);
    } else if (key == "type") {
      hdr.type = value;
    } else if (key == "encoding") {
      hdr.encoding = value;
    } else if (key == "endian") {
      hdr.endian = value;
    } else if (key == "data file" || key == "datafile") {
      throw FormatError(
          "nrrd: unsupported header field 'data file' (detached headers are "
          "not supported)");
    }
  }

  if (hdr.dimension != 3) {
    throw FormatError("nrrd: unsupported header field 'dimension': expected 3, got " +
                      std::to_string(hdr.dimension));
  }
  if (hdr.sizes.size() != 3) {
    throw FormatError("nrrd: unsupported header field 'sizes': expected 3 extents");
  }
  if (hdr.encoding != "raw" && hdr.encoding != "gzip" && hdr.encoding != "gz") {
    throw FormatError("nrrd: unsupported header field 'encoding': " +
                      hdr.encoding);
  }

  std::size_t elem_size = 0;
  enum { U8, I16, U16, I32, F32, F64 } kind;
  if (hdr.type == "unsigned char" || hdr.type == "uchar" ||
      hdr.type == "uint8" || hdr.type == "uint8_t") {
    elem_size = 1;
    kind = U8;
  } else if (hdr.type == "short" || hdr.type == "short int" ||
             hdr.type == "int16" || hdr.type == "int16_t" ||
             hdr.type == "signed short") {
    elem_size = 2;
    kind = I16;
  } else if (hdr.type == "unsigned short" || hdr.type == "uint16" ||
             hdr.type == "uint16_t" || hdr.type == "ushort") {
    elem_size = 2;
    kind = U16;
  } else if (hdr.type == "int" || hdr.type == "int32" || hdr.type == "int32_t" ||
             hdr.type == "signed int") {
    elem_size = 4;
    kind = I32;
  } else if (hdr.type == "float") {
    elem_size = 4;
    kind = F32;
  } else if (hdr.type == "double") {
    elem_size = 8;
    kind = F64;
  } else {
    throw FormatError("nrrd: unsupported header field 'type': " + hdr.type);
  }
  if (elem_size > 1 && !hdr.endian.empty() && hdr.endian != "little") {
    throw FormatError("nrrd: unsupported header field 'endian': " + hdr.endian);
  }

  // NRRD lists sizes fastest axis first; the slowest axis is the slice axis.
  const std::size_t W = hdr.sizes[0], H = hdr.sizes[1], S = hdr.sizes[2];
  Grid3 grid(S, H, W);

  std::vector<unsigned char> payload((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
  const std::size_t expected = grid.size() * elem_size;
  if (hdr.encoding == "raw") {
    if (payload.size() < expected) {
      throw FormatError("nrrd: raw data section shorter than sizes imply");
    }
  } else {
    payload = gz_inflate(payload, expected);
  }

  switch (kind) {
    case U8: decode_values<std::uint8_t>(payload, grid); break;
    case I16: decode_values<std::int16_t>(payload, grid); break;
    case U16: decode_values<std::uint16_t>(payload, grid); break;
    case I32: decode_values<std::int32_t>(payload, grid); break;
    case F32: decode_values<float>(payload, grid); break;
    case F64: decode_values<double>(payload, grid); break;
  }

  Volume vol;
  rescale_to_unit(grid);
  vol.mask = Grid3(S, H, W);
  vol.intensities = std::move(grid);
  return vol;
}

std::vector<std::size_t> slab_starts(std::size_t slices) {
  if (slices < kSlabDepth) {
    throw DataError("slice_slabs: volume has " + std::to_string(slices) +
                    " slices; at least " + std::to_string(kSlabDepth) +
                    " are required");
  }
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + kSlabDepth <= slices; s += kSlabStride) {
    starts.push_back(s);
  }
  // Anchor a final slab at S-16 when the stride does not land exactly.
  if (starts.back() + kSlabDepth < slices) {
    starts.push_back(slices - kSlabDepth);
  }
  return starts;
}

namespace {

Tensor5 extract_slab(const Grid3& grid, std::size_t start) {
  Tensor5 t(Shape5{1, kSlabDepth, grid.height, grid.width, 1});
  auto out = t.data();
  const std::size_t plane = grid.height * grid.width;
  std::copy(grid.values.begin() + static_cast<std::ptrdiff_t>(start * plane),
            grid.values.begin() +
                static_cast<std::ptrdiff_t>((start + kSlabDepth) * plane),
            out.begin());
  return t;
}

}  // namespace

std::vector<SlabBatch> slice_slabs(const Volume& vol) {
  const Grid3& g = vol.intensities;
  if (vol.mask.size() != g.size()) {
    throw ShapeError("slice_slabs: mask extents differ from intensities");
  }
  const auto starts = slab_starts(g.slices);
  std::vector<SlabBatch> slabs;
  slabs.reserve(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    SlabBatch slab;
    slab.start_slice = starts[i];
    slab.data = extract_slab(g, starts[i]);
    slab.mask = extract_slab(vol.mask, starts[i]);
    slab.position = i == 0 ? SlabPosition::First
                  : i + 1 == starts.size() ? SlabPosition::Last
                                           : SlabPosition::Interior;
    if (starts.size() == 1) slab.position = SlabPosition::First;
    slabs.push_back(std::move(slab));
  }
  return slabs;
}

std::vector<OwnedSpan> owner_intervals(std::size_t slices) {
  const auto starts = slab_starts(slices);
  // Nominal region: middle 8 slices, extended to the volume edge for the
  // first and last slab; later slabs overwrite earlier claims.
  std::vector<std::size_t> owner(slices, 0);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    const std::size_t s = starts[i];
    const std::size_t lo = i == 0 ? 0 : s + 4;
    const std::size_t hi = i + 1 == starts.size() ? slices : s + 12;
    for (std::size_t k = lo; k < hi; ++k) owner[k] = i;
  }
  std::vector<OwnedSpan> spans;
  std::size_t begin = 0;
  for (std::size_t k = 1; k <= slices; ++k) {
    if (k == slices || owner[k] != owner[begin]) {
      spans.push_back({owner[begin], begin, k});
      begin = k;
    }
  }
  return spans;
}

Grid3 stitch_soft(const std::vector<SlabBatch>& slabs,
                  const std::vector<Tensor5>& predictions) {
  if (slabs.empty() || slabs.size() != predictions.size()) {
    throw UsageError("stitch_soft: slab/prediction count mismatch");
  }
  const Shape5 slab_shape = slabs.front().data.shape();
  const std::size_t H = slab_shape.h, W = slab_shape.w;
  std::size_t slices = 0;
  for (const SlabBatch& s : slabs) {
    slices = std::max(slices, s.start_slice + kSlabDepth);
  }

  const auto spans = owner_intervals(slices);
  if (spans.back().end != slices) {
    throw DataError("stitch_soft: slabs do not cover the volume");
  }

  Grid3 out(slices, H, W);
  const std::size_t plane = H * W;
  std::vector<std::size_t> writes(slices, 0);
  for (const OwnedSpan& span : spans) {
    if (span.slab_index >= slabs.size()) {
      throw DataError("stitch_soft: owner interval refers to a missing slab");
    }
    const SlabBatch& slab = slabs[span.slab_index];
    const Tensor5& pred = predictions[span.slab_index];
    if (!(pred.shape() == Shape5{1, kSlabDepth, H, W, 1})) {
      throw ShapeError("stitch_soft: prediction shape " +
                       pred.shape().to_string() + " does not match slabs");
    }
    for (std::size_t k = span.begin; k < span.end; ++k) {
      const std::size_t local = k - slab.start_slice;
      if (local >= kSlabDepth) {
        throw DataError("stitch_soft: owner interval outside its slab");
      }
      std::copy(pred.data().begin() + static_cast<std::ptrdiff_t>(local * plane),
                pred.data().begin() +
                    static_cast<std::ptrdiff_t>((local + 1) * plane),
                out.values.begin() + static_cast<std::ptrdiff_t>(k * plane));
      ++writes[k];
    }
  }
  for (std::size_t k = 0; k < slices; ++k) {
    if (writes[k] != 1) {
      throw DataError("stitch_soft: slice " + std::to_string(k) + " written " +
                      std::to_string(writes[k]) + " times");
    }
  }
  return out;
}

Grid3 compose_prediction(const std::vector<SlabBatch>& slabs,
                         const std::vector<Tensor5>& predictions) {
  Grid3 soft = stitch_soft(slabs, predictions);
  for (double& v : soft.values) v = v >= kMaskThreshold ? 1.0 : 0.0;
  return soft;
}

Tensor5 grid_to_tensor(const Grid3& grid) {
  Tensor5 t(Shape5{1, grid.slices, grid.height, grid.width, 1});
  std::copy(grid.values.begin(), grid.values.end(), t.data().begin());
  return t;
}

Grid3 tensor_to_grid(const Tensor5& t) {
  const Shape5& s = t.shape();
  if (s.n != 1 || s.c != 1) {
    throw ShapeError("tensor_to_grid: expected shape (1, S, H, W, 1)");
  }
  Grid3 g(s.d, s.h, s.w);
  std::copy(t.data().begin(), t.data().end(), g.values.begin());
  return g;
}

void write_slice_pgm(const Grid3& grid, std::size_t slice,
                     const std::string& path) {
  if (slice >= grid.slices) {
    throw UsageError("write_slice_pgm: slice index out of range");
  }
  std::ofstream out(path);
  if (!out) throw DataError("write_slice_pgm: cannot open " + path);
  out << "P2\n" << grid.width << " " << grid.height << "\n255\n";
  for (std::size_t y = 0; y < grid.height; ++y) {
    for (std::size_t x = 0; x < grid.width; ++x) {
      const double v = std::clamp(grid.at(slice, y, x), 0.0, 1.0);
      out << static_cast<int>(std::lround(v * 255.0));
      out << (x + 1 == grid.width ? '\n' : ' ');
    }
  }
}

}  // namespace norm3d
