#include "aqt/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace aqt::model {

std::string format_conv_specs(const std::vector<ConvSpec>& specs) {
  std::string out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(specs[i].kernel) + ":" + std::to_string(specs[i].stride);
  }
  return out;
}

std::vector<ConvSpec> parse_conv_specs(const std::string& key, const std::string& text) {
  std::vector<ConvSpec> specs;
  std::stringstream stream(text);
  std::string item;
  while (std::getline(stream, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("'" + key + "': expected kernel:stride items, got '" + item + "'");
    ConvSpec spec;
    spec.kernel = parse_size(key, item.substr(0, colon));
    spec.stride = parse_size(key, item.substr(colon + 1));
    if (spec.kernel == 0 || spec.stride == 0) throw ConfigError("'" + key + "': kernel and stride must be >= 1");
    specs.push_back(spec);
  }
  if (specs.empty()) throw ConfigError("'" + key + "': at least one convolution is required");
  return specs;
}

namespace {

std::string format_sizes(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> values;
  std::stringstream stream(text);
  std::string item;
  while (std::getline(stream, item, ',')) values.push_back(parse_size(key, item));
  return values;
}

template <typename T>
BasicTensor<T> batch_slice(const BasicTensor<T>& x, std::size_t index) {
  const std::size_t stride = x.numel() / x.shape()[0];
  Shape shape(x.shape().begin() + 1, x.shape().end());
  std::vector<T> values(x.data().begin() + static_cast<std::ptrdiff_t>(index * stride),
                        x.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * stride));
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template <typename T>
BasicTensor<T> stack(const std::vector<BasicTensor<T>>& parts) {
  Shape shape = parts.front().shape();
  shape.insert(shape.begin(), parts.size());
  std::vector<T> values;
  values.reserve(shape_numel(shape));
  for (const auto& p : parts) values.insert(values.end(), p.data().begin(), p.data().end());
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template <typename T>
BasicTensor<T> with_batch(const BasicTensor<T>& obs) {
  if (obs.dim() == 3) return reshape(obs, Shape{1, obs.shape()[0], obs.shape()[1], obs.shape()[2]});
  return obs;
}

void check_observation(const Shape& shape, const AqtConfig& config) {
  if (shape.size() != 4 || shape[1] != config.frames_stacked || shape[2] != config.input_height ||
      shape[3] != config.input_width) {
    throw DimensionError("observation " + shape_string(shape) + " does not match [B, " +
                         std::to_string(config.frames_stacked) + ", " + std::to_string(config.input_height) + ", " +
                         std::to_string(config.input_width) + "]");
  }
}

template <typename T>
std::vector<nn::Conv2d<T>> build_convs(const AqtConfig& config, std::size_t last_channels, nn::Rng& rng) {
  std::vector<nn::Conv2d<T>> convs;
  std::size_t in = config.frames_stacked;
  for (std::size_t i = 0; i < config.conv.size(); ++i) {
    const std::size_t out = i + 1 < config.conv.size() ? config.conv_channels[i] : last_channels;
    convs.emplace_back(in, out, config.conv[i].kernel, config.conv[i].stride, rng);
    in = out;
  }
  return convs;
}

template <typename T>
BasicTensor<T> run_convs(const std::vector<nn::Conv2d<T>>& convs, BasicTensor<T> x) {
  for (const auto& conv : convs) x = relu(conv.forward(x));
  return x;
}

}  // namespace

std::pair<std::size_t, std::size_t> AqtConfig::feature_grid() const {
  std::size_t h = input_height;
  std::size_t w = input_width;
  for (const auto& spec : conv) {
    h = nn::conv_output_size(h, spec.kernel, spec.stride);
    w = nn::conv_output_size(w, spec.kernel, spec.stride);
  }
  return {h, w};
}

std::size_t AqtConfig::token_count() const {
  const auto [h, w] = feature_grid();
  return h * w;
}

void AqtConfig::validate() const {
  if (num_actions < 2) throw ConfigError("num_actions must be >= 2");
  if (head_count == 0 || model_dim() % head_count != 0) {
    throw ConfigError("hidden_dim " + std::to_string(model_dim()) + " must be divisible by head_count " +
                      std::to_string(head_count));
  }
  if (atoms < 2) throw ConfigError("atoms must be >= 2");
  if (!(v_min < v_max)) throw ConfigError("v_min must be < v_max");
  if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("encoder_layers and decoder_layers must be >= 1");
  if (frames_stacked == 0) throw ConfigError("frames_stacked must be >= 1");
  if (feedforward_dim == 0 || branch_hidden == 0) throw ConfigError("feedforward_dim and branch_hidden must be >= 1");
  if (conv.empty()) throw ConfigError("at least one convolution is required");
  if (conv_channels.size() + 1 != conv.size()) {
    throw ConfigError("conv_channels must list one channel count per convolution except the last");
  }
  if (noisy_sigma < 0) throw ConfigError("noisy_sigma must be >= 0");
  try {
    (void)feature_grid();
  } catch (const DimensionError& e) {
    throw ConfigError(std::string("input size does not fit the conv chain: ") + e.what());
  }
}

KeyValues AqtConfig::to_key_values() const {
  return {
      {"num_actions", std::to_string(num_actions)},
      {"hidden_dim", std::to_string(hidden_dim)},
      {"head_count", std::to_string(head_count)},
      {"feedforward_dim", std::to_string(feedforward_dim)},
      {"atoms", std::to_string(atoms)},
      {"v_min", format_double(v_min)},
      {"v_max", format_double(v_max)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"decoder_layers", std::to_string(decoder_layers)},
      {"input_height", std::to_string(input_height)},
      {"input_width", std::to_string(input_width)},
      {"frames_stacked", std::to_string(frames_stacked)},
      {"conv", format_conv_specs(conv)},
      {"conv_channels", format_sizes(conv_channels)},
      {"branch_hidden", std::to_string(branch_hidden)},
      {"noisy_sigma", format_double(noisy_sigma)},
  };
}

AqtConfig AqtConfig::from_key_values(const KeyValues& entries) {
  AqtConfig c;
  for (const auto& [key, value] : entries) {
    if (key == "num_actions") c.num_actions = parse_size(key, value);
    else if (key == "hidden_dim") c.hidden_dim = parse_size(key, value);
    else if (key == "head_count") c.head_count = parse_size(key, value);
    else if (key == "feedforward_dim") c.feedforward_dim = parse_size(key, value);
    else if (key == "atoms") c.atoms = parse_size(key, value);
    else if (key == "v_min") c.v_min = parse_double(key, value);
    else if (key == "v_max") c.v_max = parse_double(key, value);
    else if (key == "encoder_layers") c.encoder_layers = parse_size(key, value);
    else if (key == "decoder_layers") c.decoder_layers = parse_size(key, value);
    else if (key == "input_height") c.input_height = parse_size(key, value);
    else if (key == "input_width") c.input_width = parse_size(key, value);
    else if (key == "frames_stacked") c.frames_stacked = parse_size(key, value);
    else if (key == "conv") c.conv = parse_conv_specs(key, value);
    else if (key == "conv_channels") c.conv_channels = parse_sizes(key, value);
    else if (key == "branch_hidden") c.branch_hidden = parse_size(key, value);
    else if (key == "noisy_sigma") c.noisy_sigma = parse_double(key, value);
    else throw ConfigError("unknown model key '" + key + "'");
  }
  return c;
}

template <typename T>
Support<T>::Support(std::size_t atoms_, double v_min_, double v_max_)
    : atoms(atoms_), v_min(v_min_), v_max(v_max_), delta((v_max_ - v_min_) / static_cast<double>(atoms_ - 1)) {
  if (atoms_ < 2 || !(v_min_ < v_max_)) throw ContractError("support needs atoms >= 2 and v_min < v_max");
  z.resize(atoms);
  for (std::size_t i = 0; i < atoms; ++i) z[i] = static_cast<T>(v_min + static_cast<double>(i) * delta);
}

template <typename T>
int QOutput<T>::greedy_action() const {
  return argmax<T>(q_values.data());
}

template <typename T>
int argmax(std::span<const T> values) {
  if (values.empty()) throw ContractError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<int>(best);
}

template <typename T>
BasicTensor<T> dueling_logits(const BasicTensor<T>& value_logits, const BasicTensor<T>& advantage_logits) {
  if (value_logits.dim() != 2 || advantage_logits.dim() != 3 ||
      value_logits.shape()[0] != advantage_logits.shape()[0] ||
      value_logits.shape()[1] != advantage_logits.shape()[2]) {
    throw DimensionError("dueling needs value [B, atoms] and advantage [B, A, atoms], got " +
                         shape_string(value_logits.shape()) + " and " + shape_string(advantage_logits.shape()));
  }
  const auto value = reshape(value_logits, Shape{value_logits.shape()[0], 1, value_logits.shape()[1]});
  const auto centered = sub(advantage_logits, mean_axis(advantage_logits, 1, true));
  return add(value, centered);
}

template <typename T>
BasicTensor<T> expected_values(const BasicTensor<T>& dist, const Support<T>& support) {
  if (dist.dim() < 1 || dist.shape().back() != support.atoms) {
    throw DimensionError("distribution " + shape_string(dist.shape()) + " does not match " +
                         std::to_string(support.atoms) + " atoms");
  }
  const BasicTensor<T> z({support.atoms, 1}, support.z);
  Shape out_shape(dist.shape().begin(), dist.shape().end() - 1);
  const std::size_t rows = dist.numel() / support.atoms;
  const auto flat = reshape(dist, Shape{rows, support.atoms});
  return reshape(matmul(flat, z), out_shape);
}

template <typename T>
QOutput<T> aggregate_q(const BasicTensor<T>& value_logits, const BasicTensor<T>& advantage_logits,
                       const Support<T>& support) {
  if (value_logits.dim() != 1 || advantage_logits.dim() != 2) {
    throw DimensionError("aggregate_q needs value [atoms] and advantage [A, atoms]");
  }
  const std::size_t actions = advantage_logits.shape()[0];
  const std::size_t atoms = advantage_logits.shape()[1];
  const auto logits = dueling_logits(reshape(value_logits, Shape{1, atoms}),
                                     reshape(advantage_logits, Shape{1, actions, atoms}));
  QOutput<T> out;
  out.dist = reshape(softmax(logits), Shape{actions, atoms});
  out.q_values = expected_values(out.dist, support);
  out.state_value = expected_values(softmax(value_logits), support).item();
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> distributions_and_q(const HeadOutput<T>& head, const Support<T>& support) {
  auto dist = softmax(head.logits);
  auto q = expected_values(dist, support);
  return {std::move(dist), std::move(q)};
}

template <typename T>
void QNetwork<T>::resample_noise(nn::Rng& rng) {
  for (auto* layer : noisy_layers()) layer->resample_noise(rng);
}

template <typename T>
void QNetwork<T>::zero_noise() {
  for (auto* layer : noisy_layers()) layer->zero_noise();
}

template <typename T>
void QNetwork<T>::load_state_from(QNetwork<T>& other) {
  if (other.kind() != kind()) throw ContractError("cannot load " + other.kind() + " state into " + kind());
  auto target = parameters();
  nn::copy_parameters(other.parameters(), target);
  auto mine = noisy_layers();
  auto theirs = other.noisy_layers();
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const auto in = theirs[i]->noise_in();
    const auto out = theirs[i]->noise_out();
    mine[i]->set_noise(std::vector<T>(in.begin(), in.end()), std::vector<T>(out.begin(), out.end()));
  }
}

template <typename T>
AqtNetwork<T>::AqtNetwork(AqtConfig config, nn::Rng& rng) : config_(std::move(config)) {
  config_.validate();
  support_ = Support<T>(config_.atoms, config_.v_min, config_.v_max);
  const std::size_t dim = config_.model_dim();
  convs_ = build_convs<T>(config_, dim, rng);
  const auto [gh, gw] = config_.feature_grid();
  pe_ = nn::PositionalEncoding<T>(gh, gw, dim);
  for (std::size_t i = 0; i < config_.encoder_layers; ++i) {
    encoder_.emplace_back(dim, config_.head_count, config_.feedforward_dim, rng);
  }
  query_ = nn::Linear<T>(config_.num_actions, dim, rng);
  for (std::size_t i = 0; i < config_.decoder_layers; ++i) {
    decoder_.emplace_back(dim, config_.head_count, config_.feedforward_dim, rng);
  }
  value_hidden_ = nn::NoisyLinear<T>(gh * gw * dim, config_.branch_hidden, config_.noisy_sigma, rng);
  value_out_ = nn::NoisyLinear<T>(config_.branch_hidden, config_.atoms, config_.noisy_sigma, rng);
  advantage_hidden_ = nn::NoisyLinear<T>(dim, config_.branch_hidden, config_.noisy_sigma, rng);
  advantage_out_ = nn::NoisyLinear<T>(config_.branch_hidden, config_.atoms, config_.noisy_sigma, rng);
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::feature_extract(const BasicTensor<T>& obs) const {
  const auto x = with_batch(obs);
  check_observation(x.shape(), config_);
  const auto features = run_convs(convs_, x);  // [B, D, gh, gw]
  const std::size_t batch = features.shape()[0];
  const std::size_t dim = features.shape()[1];
  const std::size_t length = features.shape()[2] * features.shape()[3];
  const auto tokens = permute(reshape(features, Shape{batch, dim, length}), {0, 2, 1});
  return nn::positional_encode(tokens, pe_);
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::query_branch() const {
  const std::size_t actions = config_.num_actions;
  std::vector<T> identity(actions * actions, T(0));
  for (std::size_t a = 0; a < actions; ++a) identity[a * actions + a] = T(1);
  return query_.forward(BasicTensor<T>({actions, actions}, std::move(identity)));
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::encode(const BasicTensor<T>& tokens) {
  auto x = tokens;
  for (auto& layer : encoder_) x = layer.forward(x);
  return x;
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::decode(const BasicTensor<T>& queries, const BasicTensor<T>& memory) {
  if (memory.dim() != 3) throw DimensionError("decoder memory must be [B, L, D]");
  auto x = queries;
  if (queries.dim() == 2) {
    const auto expanded = BasicTensor<T>::zeros({memory.shape()[0], queries.shape()[0], queries.shape()[1]});
    x = add(expanded, queries);
  }
  for (auto& layer : decoder_) x = layer.forward(x, memory);
  return x;
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::value_branch(const BasicTensor<T>& encoded, nn::Mode mode) const {
  const std::size_t batch = encoded.shape()[0];
  const auto flat = reshape(encoded, Shape{batch, encoded.numel() / batch});
  return value_out_.forward(relu(value_hidden_.forward(flat, mode)), mode);
}

template <typename T>
BasicTensor<T> AqtNetwork<T>::advantage_branch(const BasicTensor<T>& decoded, nn::Mode mode) const {
  return advantage_out_.forward(relu(advantage_hidden_.forward(decoded, mode)), mode);
}

template <typename T>
HeadOutput<T> AqtNetwork<T>::forward(const BasicTensor<T>& obs, nn::Mode mode) {
  const auto encoded = encode(feature_extract(obs));
  const auto decoded = decode(query_branch(), encoded);
  HeadOutput<T> out;
  out.value_logits = value_branch(encoded, mode);
  out.advantage_logits = advantage_branch(decoded, mode);
  out.logits = dueling_logits(out.value_logits, out.advantage_logits);
  return out;
}

template <typename T>
AttentionRecord<T> AqtNetwork<T>::attention(std::size_t batch_index) const {
  AttentionRecord<T> record;
  std::tie(record.grid_height, record.grid_width) = config_.feature_grid();
  std::vector<BasicTensor<T>> enc;
  for (const auto& layer : encoder_) {
    const auto& attn = layer.self_attn.last_attention();
    if (attn.dim() != 4 || batch_index >= attn.shape()[0]) throw ContractError("no encoder attention captured");
    enc.push_back(batch_slice(attn, batch_index));
  }
  std::vector<BasicTensor<T>> dec;
  for (const auto& layer : decoder_) {
    const auto& attn = layer.cross_attn.last_attention();
    if (attn.dim() != 4 || batch_index >= attn.shape()[0]) throw ContractError("no decoder attention captured");
    dec.push_back(batch_slice(attn, batch_index));
  }
  record.encoder_self = stack(enc);
  record.decoder_cross = stack(dec);
  return record;
}

template <typename T>
QOutput<T> AqtNetwork<T>::evaluate(const BasicTensor<T>& obs, nn::Mode mode) {
  NoGradGuard no_grad;
  const auto x = with_batch(obs);
  if (x.shape()[0] != 1) throw DimensionError("evaluate takes a single observation");
  const auto head = forward(x, mode);
  const std::size_t actions = config_.num_actions;
  const std::size_t atoms = config_.atoms;
  QOutput<T> out;
  out.dist = reshape(softmax(head.logits), Shape{actions, atoms});
  out.q_values = expected_values(out.dist, support_);
  out.state_value = expected_values(softmax(head.value_logits), support_).item();
  out.attention = attention(0);
  return out;
}

template <typename T>
nn::ParameterList<T> AqtNetwork<T>::parameters() const {
  nn::ParameterList<T> params;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(params, "features.conv" + std::to_string(i));
  for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect(params, "encoder." + std::to_string(i));
  query_.collect(params, "query_branch");
  for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect(params, "decoder." + std::to_string(i));
  value_hidden_.collect(params, "value.hidden");
  value_out_.collect(params, "value.out");
  advantage_hidden_.collect(params, "advantage.hidden");
  advantage_out_.collect(params, "advantage.out");
  return params;
}

template <typename T>
std::vector<nn::NoisyLinear<T>*> AqtNetwork<T>::noisy_layers() {
  return {&value_hidden_, &value_out_, &advantage_hidden_, &advantage_out_};
}

template <typename T>
std::unique_ptr<QNetwork<T>> AqtNetwork<T>::clone() const {
  nn::Rng scratch(0);
  auto copy = std::make_unique<AqtNetwork<T>>(config_, scratch);
  copy->load_state_from(const_cast<AqtNetwork<T>&>(*this));
  return copy;
}

template <typename T>
RainbowNetwork<T>::RainbowNetwork(AqtConfig config, nn::Rng& rng) : config_(std::move(config)) {
  config_.validate();
  support_ = Support<T>(config_.atoms, config_.v_min, config_.v_max);
  convs_ = build_convs<T>(config_, kLastChannels, rng);
  const std::size_t flat = flat_features();
  value_hidden_ = nn::NoisyLinear<T>(flat, config_.branch_hidden, config_.noisy_sigma, rng);
  value_out_ = nn::NoisyLinear<T>(config_.branch_hidden, config_.atoms, config_.noisy_sigma, rng);
  advantage_hidden_ = nn::NoisyLinear<T>(flat, config_.branch_hidden, config_.noisy_sigma, rng);
  advantage_out_ =
      nn::NoisyLinear<T>(config_.branch_hidden, config_.atoms * config_.num_actions, config_.noisy_sigma, rng);
}

template <typename T>
std::size_t RainbowNetwork<T>::flat_features() const {
  return kLastChannels * config_.token_count();
}

template <typename T>
HeadOutput<T> RainbowNetwork<T>::forward(const BasicTensor<T>& obs, nn::Mode mode) {
  const auto x = with_batch(obs);
  check_observation(x.shape(), config_);
  const std::size_t batch = x.shape()[0];
  const auto flat = reshape(run_convs(convs_, x), Shape{batch, flat_features()});
  HeadOutput<T> out;
  out.value_logits = value_out_.forward(relu(value_hidden_.forward(flat, mode)), mode);
  out.advantage_logits = reshape(advantage_out_.forward(relu(advantage_hidden_.forward(flat, mode)), mode),
                                 Shape{batch, config_.num_actions, config_.atoms});
  out.logits = dueling_logits(out.value_logits, out.advantage_logits);
  return out;
}

template <typename T>
nn::ParameterList<T> RainbowNetwork<T>::parameters() const {
  nn::ParameterList<T> params;
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect(params, "features.conv" + std::to_string(i));
  value_hidden_.collect(params, "value.hidden");
  value_out_.collect(params, "value.out");
  advantage_hidden_.collect(params, "advantage.hidden");
  advantage_out_.collect(params, "advantage.out");
  return params;
}

template <typename T>
std::vector<nn::NoisyLinear<T>*> RainbowNetwork<T>::noisy_layers() {
  return {&value_hidden_, &value_out_, &advantage_hidden_, &advantage_out_};
}

template <typename T>
std::unique_ptr<QNetwork<T>> RainbowNetwork<T>::clone() const {
  nn::Rng scratch(0);
  auto copy = std::make_unique<RainbowNetwork<T>>(config_, scratch);
  copy->load_state_from(const_cast<RainbowNetwork<T>&>(*this));
  return copy;
}

template <typename T>
std::unique_ptr<QNetwork<T>> make_network(const std::string& kind, const AqtConfig& config, nn::Rng& rng) {
  if (kind == "aqt") return std::make_unique<AqtNetwork<T>>(config, rng);
  if (kind == "rainbow") return std::make_unique<RainbowNetwork<T>>(config, rng);
  throw ContractError("unknown network kind '" + kind + "'");
}

#define AQT_INSTANTIATE_MODEL(T)                                                                               \
  template struct Support<T>;                                                                                  \
  template struct QOutput<T>;                                                                                  \
  template int argmax<T>(std::span<const T>);                                                                  \
  template BasicTensor<T> dueling_logits(const BasicTensor<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> expected_values(const BasicTensor<T>&, const Support<T>&);                           \
  template QOutput<T> aggregate_q(const BasicTensor<T>&, const BasicTensor<T>&, const Support<T>&);            \
  template std::pair<BasicTensor<T>, BasicTensor<T>> distributions_and_q(const HeadOutput<T>&,                 \
                                                                         const Support<T>&);                   \
  template class QNetwork<T>;                                                                                  \
  template class AqtNetwork<T>;                                                                                \
  template class RainbowNetwork<T>;                                                                            \
  template std::unique_ptr<QNetwork<T>> make_network<T>(const std::string&, const AqtConfig&, nn::Rng&);

AQT_INSTANTIATE_MODEL(float)
AQT_INSTANTIATE_MODEL(double)

#undef AQT_INSTANTIATE_MODEL

}  // namespace aqt::model
