#include "mstkd/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "mstkd/datasets.hpp"
#include "mstkd/error.hpp"

namespace mstkd::model {

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'S', 'T', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::size_t kEmbedChunk = 1024;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (!tok.empty()) out.push_back(std::stoull(tok));
  }
  return out;
}

void add_backbone_params(const Backbone& b, Checkpoint& c) {
  for (const auto& layer : b.layers) {
    c.params.push_back(layer.weight);
    c.params.push_back(layer.bias);
  }
  c.meta["input_dim"] = std::to_string(b.config.input_dim);
  c.meta["hidden"] = join_sizes(b.config.hidden);
  c.meta["embedding_dim"] = std::to_string(b.config.embedding_dim);
  c.meta["slope"] = format_double(b.config.slope);
}

Backbone backbone_from(const Checkpoint& c) {
  Backbone b;
  b.config.input_dim = std::stoull(c.get("input_dim"));
  b.config.hidden = split_sizes(c.get("hidden"));
  b.config.embedding_dim = std::stoull(c.get("embedding_dim"));
  b.config.slope = std::stod(c.get("slope"));
  b.config.validate();
  for (std::size_t i = 0; i <= b.config.hidden.size(); ++i) {
    const std::string prefix = "backbone." + std::to_string(i);
    b.layers.push_back(
        {c.param(prefix + ".weight"), c.param(prefix + ".bias")});
  }
  return b;
}

Matrix embed_chunked(const Matrix& inputs, std::size_t out_dim,
                     const auto& forward_chunk) {
  Matrix out(inputs.rows(), out_dim);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < inputs.rows(); start += kEmbedChunk) {
    const std::size_t end = std::min(inputs.rows(), start + kEmbedChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    ad::Tape tape;
    ParamBinder binder(tape, false);
    Var x = tape.constant(gather_rows(inputs, idx));
    const Matrix& e = forward_chunk(binder, x).value();
    std::copy(e.values().begin(), e.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(start * out_dim));
  }
  return out;
}

}  // namespace

Var ParamBinder::bind(const Parameter& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var v = trainable_ ? tape_->leaf(p.value) : tape_->constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

Matrix ParamBinder::grad(const Parameter& p) const {
  auto it = bound_.find(&p);
  if (it == bound_.end()) {
    throw ContractError("parameter '" + p.name + "' was not bound to the tape");
  }
  if (!tape_->has_grad(it->second)) {
    return Matrix(p.value.rows(), p.value.cols());
  }
  return tape_->grad(it->second);
}

Linear Linear::init(const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng) {
  Linear l;
  l.weight = {name + ".weight", Matrix(in, out)};
  l.bias = {name + ".bias", Matrix(1, out)};
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  for (auto& w : l.weight.value.values()) w = uniform(rng);
  return l;
}

Var Linear::forward(ParamBinder& binder, Var x) const {
  if (x.cols() != input_dim()) {
    throw DimensionError(weight.name + ": expected input width " +
                         std::to_string(input_dim()) + ", got " +
                         std::to_string(x.cols()));
  }
  return ad::add_row_bias(ad::matmul(x, binder.bind(weight)), binder.bind(bias));
}

void BackboneConfig::validate() const {
  if (input_dim == 0) throw ConfigError("backbone input_dim must be > 0");
  if (embedding_dim < 2) throw ConfigError("embedding_dim must be >= 2");
  if (hidden.empty()) throw ConfigError("backbone needs at least one hidden layer");
  for (auto h : hidden)
    if (h == 0) throw ConfigError("hidden layer sizes must be > 0");
  if (!(slope >= 0.0 && slope < 1.0))
    throw ConfigError("leaky_relu slope must lie in [0, 1)");
}

Backbone Backbone::init(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone b;
  b.config = cfg;
  std::size_t in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.hidden.size(); ++i) {
    b.layers.push_back(
        Linear::init("backbone." + std::to_string(i), in, cfg.hidden[i], rng));
    in = cfg.hidden[i];
  }
  b.layers.push_back(Linear::init(
      "backbone." + std::to_string(cfg.hidden.size()), in, cfg.embedding_dim, rng));
  return b;
}

Var Backbone::forward(ParamBinder& binder, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(binder, x);
    if (i + 1 < layers.size()) x = ad::leaky_relu(x, config.slope);
  }
  return x;
}

Parameter init_header(const std::string& name, std::size_t classes,
                      std::size_t dim, Rng& rng) {
  Parameter p{name, Matrix(classes, dim)};
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < classes; ++r) {
    auto row = p.value.row(r);
    double s = 0.0;
    for (auto& v : row) {
      v = normal(rng);
      s += v * v;
    }
    const double norm = std::sqrt(s);
    for (auto& v : row) v /= norm;
  }
  return p;
}

namespace {

ForwardOutput embed_and_score(const Backbone& backbone, const Parameter* header,
                              ParamBinder& binder, Var batch, bool with_logits) {
  if (batch.cols() != backbone.config.input_dim) {
    throw DimensionError("expected input width " +
                         std::to_string(backbone.config.input_dim) + ", got " +
                         std::to_string(batch.cols()));
  }
  ForwardOutput out;
  out.embeddings = ad::l2_normalize(backbone.forward(binder, batch));
  if (with_logits && header != nullptr) {
    Var w = ad::l2_normalize(binder.bind(*header));
    out.logits = ad::matmul(out.embeddings, ad::transpose(w));
  }
  return out;
}

}  // namespace

TeacherModel TeacherModel::init(const BackboneConfig& cfg, std::size_t classes,
                                std::uint8_t group, Rng& rng) {
  if (classes == 0) throw ConfigError("teacher needs at least one class");
  TeacherModel t;
  t.backbone = Backbone::init(cfg, rng);
  t.header = init_header("header", classes, cfg.embedding_dim, rng);
  t.assigned_group = group;
  return t;
}

std::vector<Parameter*> TeacherModel::parameters() {
  std::vector<Parameter*> ps;
  for (auto& l : backbone.layers) {
    ps.push_back(&l.weight);
    ps.push_back(&l.bias);
  }
  ps.push_back(&header);
  return ps;
}

std::vector<const Parameter*> TeacherModel::parameters() const {
  auto ps = const_cast<TeacherModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

ForwardOutput teacher_forward(const TeacherModel& t, ParamBinder& binder,
                              Var batch, bool with_logits) {
  return embed_and_score(t.backbone, &t.header, binder, batch, with_logits);
}

const char* to_string(AdaptorKind kind) {
  switch (kind) {
    case AdaptorKind::kSL: return "SL";
    case AdaptorKind::kDuL: return "DuL";
    case AdaptorKind::kDLDPO: return "DLDPO";
  }
  return "?";
}

AdaptorKind parse_adaptor_kind(const std::string& text) {
  if (text == "SL") return AdaptorKind::kSL;
  if (text == "DuL") return AdaptorKind::kDuL;
  if (text == "DLDPO") return AdaptorKind::kDLDPO;
  throw ConfigError("unknown adaptor kind '" + text + "'");
}

AdaptorModel AdaptorModel::init(AdaptorKind kind, std::size_t groups,
                                std::size_t dim, Rng& rng) {
  if (groups < 1 || dim < 2) throw ConfigError("adaptor needs groups >= 1, dim >= 2");
  AdaptorModel a;
  a.kind = kind;
  a.groups = groups;
  a.dim = dim;
  a.first = Linear::init("first", groups * dim, dim, rng);
  if (kind != AdaptorKind::kSL) a.second = Linear::init("second", dim, dim, rng);
  a.dropout = kind == AdaptorKind::kDLDPO ? kAdaptorDropout : 0.0;
  return a;
}

std::vector<Parameter*> AdaptorModel::parameters() {
  std::vector<Parameter*> ps{&first.weight, &first.bias};
  if (second) {
    ps.push_back(&second->weight);
    ps.push_back(&second->bias);
  }
  return ps;
}

std::vector<const Parameter*> AdaptorModel::parameters() const {
  auto ps = const_cast<AdaptorModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

Var adaptor_forward(const AdaptorModel& a, ParamBinder& binder, Var fused,
                    Mode mode, Rng& rng) {
  if (fused.cols() != a.input_dim()) {
    throw DimensionError("adaptor expects fused width " +
                         std::to_string(a.input_dim()) + ", got " +
                         std::to_string(fused.cols()));
  }
  Var h = a.first.forward(binder, fused);
  if (a.second) {
    h = ad::dropout(h, a.dropout, mode, rng);
    h = ad::leaky_relu(h, a.slope);
    h = a.second->forward(binder, h);
  }
  return ad::l2_normalize(h);
}

Matrix fuse_inputs(std::span<const Matrix> per_teacher,
                   std::span<const std::size_t> order) {
  if (order.size() != per_teacher.size()) {
    throw ContractError("fuse_inputs: order lists " + std::to_string(order.size()) +
                        " teachers, got " + std::to_string(per_teacher.size()));
  }
  std::vector<Matrix> blocks;
  for (auto g : order) {
    if (g >= per_teacher.size()) throw ContractError("fuse_inputs: bad order index");
    blocks.push_back(per_teacher[g]);
  }
  return concat_columns(blocks);
}

Var fuse_inputs(std::span<const Var> per_teacher,
                std::span<const std::size_t> order) {
  if (order.size() != per_teacher.size()) {
    throw ContractError("fuse_inputs: order lists " + std::to_string(order.size()) +
                        " teachers, got " + std::to_string(per_teacher.size()));
  }
  std::vector<Var> blocks;
  for (auto g : order) {
    if (g >= per_teacher.size()) throw ContractError("fuse_inputs: bad order index");
    blocks.push_back(per_teacher[g]);
  }
  return ad::concat_cols(blocks);
}

std::vector<double> trace_teacher_attribution(const AdaptorModel& a) {
  if (a.kind != AdaptorKind::kSL) {
    throw UnsupportedError(std::string("teacher attribution needs an SL adaptor, got ") +
                           to_string(a.kind));
  }
  const Matrix& w = a.first.weight.value;
  std::vector<double> mass(a.groups, 0.0);
  double total = 0.0;
  for (std::size_t g = 0; g < a.groups; ++g) {
    double s = 0.0;
    for (std::size_t r = g * a.dim; r < (g + 1) * a.dim; ++r)
      for (double v : w.row(r)) s += v * v;
    mass[g] = std::sqrt(s);
    total += mass[g];
  }
  if (total > 0.0)
    for (auto& m : mass) m /= total;
  return mass;
}

StudentModel StudentModel::init(const BackboneConfig& cfg, loss::StudentMode mode,
                                std::size_t classes, Rng& rng) {
  StudentModel s;
  s.mode = mode;
  s.backbone = Backbone::init(cfg, rng);
  if (mode == loss::StudentMode::kEafKd) {
    if (classes == 0) throw ConfigError("eaf_kd student needs at least one class");
    s.header = init_header("header", classes, cfg.embedding_dim, rng);
  }
  return s;
}

std::vector<Parameter*> StudentModel::parameters() {
  std::vector<Parameter*> ps;
  for (auto& l : backbone.layers) {
    ps.push_back(&l.weight);
    ps.push_back(&l.bias);
  }
  if (header) ps.push_back(&*header);
  return ps;
}

std::vector<const Parameter*> StudentModel::parameters() const {
  auto ps = const_cast<StudentModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

ForwardOutput student_forward(const StudentModel& s, ParamBinder& binder,
                              Var batch, bool with_logits) {
  return embed_and_score(s.backbone, s.header ? &*s.header : nullptr, binder,
                         batch, with_logits);
}

std::size_t parameter_count(std::span<const Parameter* const> params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->value.size();
  return n;
}

Matrix embed(const TeacherModel& t, const Matrix& inputs) {
  return embed_chunked(inputs, t.backbone.config.embedding_dim,
                       [&](ParamBinder& b, Var x) {
                         return teacher_forward(t, b, x, false).embeddings;
                       });
}

Matrix embed(const StudentModel& s, const Matrix& inputs) {
  return embed_chunked(inputs, s.backbone.config.embedding_dim,
                       [&](ParamBinder& b, Var x) {
                         return student_forward(s, b, x, false).embeddings;
                       });
}

Matrix embed(const AdaptorModel& a, const Matrix& fused) {
  Rng unused(0);
  return embed_chunked(fused, a.dim, [&](ParamBinder& b, Var x) {
    return adaptor_forward(a, b, x, Mode::kEval, unused);
  });
}

const Parameter& Checkpoint::param(const std::string& name) const {
  for (const auto& p : params)
    if (p.name == name) return p;
  throw FormatError("checkpoint lacks parameter '" + name + "'");
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw FormatError("checkpoint lacks metadata '" + key + "'");
  return it->second;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  std::string manifest;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of(" \n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw ContractError("checkpoint metadata must be single-line, key without spaces");
    manifest += "meta " + k + " " + v + "\n";
  }
  std::size_t offset = 0;
  for (const auto& p : ckpt.params) {
    manifest += "param " + p.name + " " + std::to_string(p.value.rows()) + " " +
                std::to_string(p.value.cols()) + " " + std::to_string(offset) + "\n";
    offset += p.value.size();
  }
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  auto put = [&out](std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(kCheckpointVersion, 4);
  put(manifest.size(), 8);
  out.insert(out.end(), manifest.begin(), manifest.end());
  for (const auto& p : ckpt.params)
    for (double v : p.value.values()) put(std::bit_cast<std::uint64_t>(v), 8);
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  auto get = [&bytes](std::size_t off, int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t{bytes[off + i]} << (8 * i);
    return v;
  };
  if (bytes.size() < 16) throw FormatError("checkpoint truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("checkpoint has wrong magic bytes");
  if (get(4, 4) != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version");
  const std::uint64_t len = get(8, 8);
  if (len > bytes.size() - 16) throw FormatError("checkpoint manifest truncated");
  const std::string manifest(bytes.begin() + 16,
                             bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  const std::size_t data_begin = 16 + len;
  const std::size_t doubles = (bytes.size() - data_begin) / 8;
  if ((bytes.size() - data_begin) % 8 != 0)
    throw FormatError("checkpoint data is not a whole number of f64 values");

  Checkpoint c;
  std::istringstream in(manifest);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string tag;
    fields >> tag;
    if (tag == "meta") {
      std::string key, value;
      fields >> key;
      std::getline(fields, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      c.meta[key] = value;
    } else if (tag == "param") {
      std::string name;
      std::uint64_t rows, cols, offset;
      if (!(fields >> name >> rows >> cols >> offset))
        throw FormatError("malformed checkpoint manifest line '" + line + "'");
      if (cols != 0 && rows > doubles / cols)
        throw FormatError("checkpoint parameter '" + name + "' overflows data");
      if (offset > doubles || rows * cols > doubles - offset)
        throw FormatError("checkpoint parameter '" + name + "' out of range");
      Matrix m(rows, cols);
      for (std::size_t i = 0; i < m.size(); ++i)
        m[i] = std::bit_cast<double>(get(data_begin + (offset + i) * 8, 8));
      c.params.push_back({name, std::move(m)});
    } else if (!tag.empty()) {
      throw FormatError("unknown checkpoint manifest entry '" + tag + "'");
    }
  }
  return c;
}

Checkpoint to_checkpoint(const TeacherModel& t) {
  Checkpoint c;
  c.meta["kind"] = "teacher";
  c.meta["group"] = std::to_string(t.assigned_group);
  c.meta["best_epoch"] = std::to_string(t.best_epoch);
  add_backbone_params(t.backbone, c);
  c.params.push_back(t.header);
  return c;
}

Checkpoint to_checkpoint(const AdaptorModel& a) {
  Checkpoint c;
  c.meta["kind"] = "adaptor";
  c.meta["adaptor"] = to_string(a.kind);
  c.meta["groups"] = std::to_string(a.groups);
  c.meta["dim"] = std::to_string(a.dim);
  for (const auto* p : a.parameters()) c.params.push_back(*p);
  return c;
}

Checkpoint to_checkpoint(const StudentModel& s) {
  Checkpoint c;
  c.meta["kind"] = "student";
  c.meta["mode"] = loss::to_string(s.mode);
  add_backbone_params(s.backbone, c);
  if (s.header) c.params.push_back(*s.header);
  return c;
}

TeacherModel teacher_from_checkpoint(const Checkpoint& c) {
  if (c.get("kind") != "teacher") throw FormatError("checkpoint is not a teacher");
  TeacherModel t;
  t.backbone = backbone_from(c);
  t.header = c.param("header");
  t.assigned_group = static_cast<std::uint8_t>(std::stoul(c.get("group")));
  t.best_epoch = std::stoull(c.get("best_epoch"));
  return t;
}

AdaptorModel adaptor_from_checkpoint(const Checkpoint& c) {
  if (c.get("kind") != "adaptor") throw FormatError("checkpoint is not an adaptor");
  AdaptorModel a;
  a.kind = parse_adaptor_kind(c.get("adaptor"));
  a.groups = std::stoull(c.get("groups"));
  a.dim = std::stoull(c.get("dim"));
  a.first = {c.param("first.weight"), c.param("first.bias")};
  if (a.kind != AdaptorKind::kSL)
    a.second = Linear{c.param("second.weight"), c.param("second.bias")};
  a.dropout = a.kind == AdaptorKind::kDLDPO ? kAdaptorDropout : 0.0;
  if (a.first.input_dim() != a.groups * a.dim || a.first.output_dim() != a.dim)
    throw FormatError("adaptor checkpoint shapes disagree with metadata");
  return a;
}

StudentModel student_from_checkpoint(const Checkpoint& c) {
  if (c.get("kind") != "student") throw FormatError("checkpoint is not a student");
  StudentModel s;
  s.mode = loss::parse_student_mode(c.get("mode"));
  s.backbone = backbone_from(c);
  if (s.mode == loss::StudentMode::kEafKd) s.header = c.param("header");
  return s;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  data::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(data::read_file(path));
}

}  // namespace mstkd::model
