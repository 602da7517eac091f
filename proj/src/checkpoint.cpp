#include "relspray/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace relspray {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'R', 'S', 'P', 'Y', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 1;

struct Entry {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::uint64_t offset = 0, nbytes = 0;
};

std::vector<std::string> layer_names(const std::vector<LinearLayer>& layers) {
  std::vector<std::string> names;
  int block = 0, fc = 0;
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Conv3) names.push_back("block" + std::to_string(++block) + ".conv");
    else if (l.kind == LayerKind::DownConv3) names.push_back("block" + std::to_string(block) + ".down");
    else names.push_back("fc" + std::to_string(++fc));
  }
  return names;
}

std::vector<std::uint64_t> weight_shape(const LinearLayer& l) {
  if (l.is_conv()) return {static_cast<std::uint64_t>(l.conv.out_ch), static_cast<std::uint64_t>(l.conv.in_ch), 3, 3, 3};
  return {static_cast<std::uint64_t>(l.out_units), static_cast<std::uint64_t>(l.in_units)};
}

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw DataError("checkpoint truncated");
  return v;
}

json arch_json(const ArchSpec& a) {
  return {{"input", {a.input.x, a.input.y, a.input.z}}, {"in_channels", a.in_channels}, {"blocks", a.blocks},
          {"channels", a.channels}, {"hidden", a.hidden}, {"classes", a.classes}};
}

ArchSpec arch_from(const json& j) {
  ArchSpec a;
  a.input = {j.at("input").at(0).get<int>(), j.at("input").at(1).get<int>(), j.at("input").at(2).get<int>()};
  a.in_channels = j.at("in_channels").get<int>();
  a.blocks = j.at("blocks").get<int>();
  a.channels = j.at("channels").get<int>();
  a.hidden = j.at("hidden").get<int>();
  a.classes = j.at("classes").get<int>();
  return a;
}

json config_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},           {"batch_size", c.batch_size},   {"lr_init", c.lr_init},
          {"lr_factor", c.lr_factor},     {"patience", c.patience},       {"lr_floor", c.lr_floor},
          {"beta1", c.beta1},             {"beta2", c.beta2},             {"adam_eps", c.adam_eps},
          {"improvement_tol", c.improvement_tol}, {"guided_lambda", c.guided_lambda}, {"bias_init", c.bias_init},
          {"seed", c.seed}};
}

TrainConfig config_from(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_init = j.value("lr_init", c.lr_init);
  c.lr_factor = j.value("lr_factor", c.lr_factor);
  c.patience = j.value("patience", c.patience);
  c.lr_floor = j.value("lr_floor", c.lr_floor);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.improvement_tol = j.value("improvement_tol", c.improvement_tol);
  c.guided_lambda = j.value("guided_lambda", c.guided_lambda);
  c.bias_init = j.value("bias_init", c.bias_init);
  c.seed = j.value("seed", c.seed);
  return c;
}

json history_to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_loss", e.val_loss},
                      {"val_accuracy", e.val_accuracy},
                      {"train_guided", e.train_guided},
                      {"val_guided", e.val_guided}});
  auto events = [](const std::vector<PlateauEvent>& v) {
    json a = json::array();
    for (const auto& p : v)
      a.push_back(
          {{"epoch", p.epoch}, {"lr_before", p.lr_before}, {"lr_after", p.lr_after}, {"reset_to_epoch", p.reset_to_epoch}});
    return a;
  };
  return {{"epochs", epochs},         {"plateaus", events(h.plateaus)},  {"collapses", events(h.collapses)},
          {"init_draws", h.init_draws}, {"best_epoch", h.best_epoch},      {"best_val_loss", h.best_val_loss}};
}

TrainHistory history_from(const json& j) {
  TrainHistory h;
  for (const auto& e : j.at("epochs"))
    h.epochs.push_back({e.at("epoch").get<int>(), e.at("lr").get<double>(), e.at("train_loss").get<double>(),
                        e.at("train_accuracy").get<double>(), e.at("val_loss").get<double>(),
                        e.at("val_accuracy").get<double>(), e.value("train_guided", 0.0), e.value("val_guided", 0.0)});
  auto events = [](const json& a, std::vector<PlateauEvent>& out) {
    for (const auto& p : a)
      out.push_back({p.at("epoch").get<int>(), p.at("lr_before").get<double>(), p.at("lr_after").get<double>(),
                     p.at("reset_to_epoch").get<int>()});
  };
  events(j.at("plateaus"), h.plateaus);
  if (j.contains("collapses")) events(j.at("collapses"), h.collapses);
  h.init_draws = j.value("init_draws", 1);
  h.best_epoch = j.value("best_epoch", 0);
  h.best_val_loss = j.value("best_val_loss", 0.0);
  return h;
}

}  // namespace

std::string history_json(const TrainHistory& h) { return history_to_json(h).dump(2); }

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& p = ckpt.params;
  const auto names = layer_names(p.layers);
  std::vector<Entry> table;
  std::vector<const std::vector<float>*> data;
  std::uint64_t offset = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    table.push_back({names[l] + ".weight", weight_shape(p.layers[l]), offset, p.weights[l].size() * sizeof(float)});
    offset += table.back().nbytes;
    data.push_back(&p.weights[l]);
    table.push_back({names[l] + ".bias", {p.biases[l].size()}, offset, p.biases[l].size() * sizeof(float)});
    offset += table.back().nbytes;
    data.push_back(&p.biases[l]);
  }
  std::ofstream os(dir / "model.bin", std::ios::binary);
  if (!os) throw DataError("cannot write " + (dir / "model.bin").string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(table.size()));
  for (const auto& e : table) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) put<std::uint64_t>(os, d);
    put<std::uint8_t>(os, kFloat32);
    put<std::uint64_t>(os, e.offset);
    put<std::uint64_t>(os, e.nbytes);
  }
  for (const auto* v : data) os.write(reinterpret_cast<const char*>(v->data()), static_cast<std::streamsize>(v->size() * sizeof(float)));
  if (!os) throw DataError("failed writing checkpoint");

  json side = {{"format", "relspray-checkpoint"},
               {"version", kVersion},
               {"variant", to_string(ckpt.variant)},
               {"arch", arch_json(p.arch)},
               {"parameters", p.count()},
               {"train_config", config_json(ckpt.config)},
               {"history", history_to_json(ckpt.history)}};
  std::ofstream js(dir / "model.json");
  js << side.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream js(dir / "model.json");
  if (!js) throw DataError("missing " + (dir / "model.json").string());
  json side;
  try {
    js >> side;
  } catch (const json::exception& e) {
    throw DataError(std::string("bad checkpoint sidecar: ") + e.what());
  }
  Checkpoint ck;
  ck.variant = parse_variant(side.at("variant").get<std::string>());
  ck.config = config_from(side.at("train_config"));
  ck.history = history_from(side.at("history"));
  ck.params = NetworkParams<float>::zeros(arch_from(side.at("arch")));

  std::ifstream is(dir / "model.bin", std::ios::binary);
  if (!is) throw DataError("missing " + (dir / "model.bin").string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError("not a checkpoint file");
  if (get<std::uint32_t>(is) != kVersion) throw DataError("unsupported checkpoint version");
  const auto n = get<std::uint32_t>(is);
  const auto names = layer_names(ck.params.layers);
  if (n != 2 * names.size()) throw DataError("checkpoint layer table does not match architecture");
  std::vector<Entry> table(n);
  for (auto& e : table) {
    const auto len = get<std::uint32_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    const auto nd = get<std::uint32_t>(is);
    for (std::uint32_t d = 0; d < nd; ++d) e.shape.push_back(get<std::uint64_t>(is));
    if (get<std::uint8_t>(is) != kFloat32) throw DataError("unsupported checkpoint dtype");
    e.offset = get<std::uint64_t>(is);
    e.nbytes = get<std::uint64_t>(is);
  }
  const auto base = is.tellg();
  for (std::size_t l = 0; l < names.size(); ++l) {
    for (int which = 0; which < 2; ++which) {
      const Entry& e = table[2 * l + which];
      auto& dst = which == 0 ? ck.params.weights[l] : ck.params.biases[l];
      if (e.name != names[l] + (which == 0 ? ".weight" : ".bias") || e.nbytes != dst.size() * sizeof(float))
        throw DataError("checkpoint entry " + e.name + " does not match architecture");
      is.seekg(base + static_cast<std::streamoff>(e.offset));
      is.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(e.nbytes));
      if (!is) throw DataError("checkpoint truncated");
    }
  }
  return ck;
}

}  // namespace relspray
