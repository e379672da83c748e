#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "deepnorm/errors.hpp"
#include "deepnorm/model.hpp"

namespace deepnorm {

namespace {

constexpr char kMagic[] = "DNLB1";
constexpr std::size_t kMagicLen = 5;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint64_t get_uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated file");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const TransformerModel& model, const std::string& path) {
  std::string out(kMagic, kMagicLen);
  const auto config = to_json(model.config()).dump();
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  put_u32(out, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& [name, tensor] : model.parameters()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (auto d : tensor.shape()) put_u64(out, d);
    for (double v : tensor.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("checkpoint: write to " + path + " failed");
}

TransformerModel load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("checkpoint: cannot open " + path);
  Reader in(std::string(std::istreambuf_iterator<char>(file), {}));
  if (in.get_bytes(kMagicLen) != std::string(kMagic, kMagicLen)) throw DataError("checkpoint: bad magic in " + path);
  const auto config_len = in.get_uint(4);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(in.get_bytes(config_len)));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed config: ") + e.what());
  }
  const auto count = in.get_uint(4);
  ParameterSet params;
  for (std::uint64_t p = 0; p < count; ++p) {
    auto name = in.get_bytes(in.get_uint(4));
    const auto rank = in.get_uint(4);
    Shape shape;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(in.get_uint(8));
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) v = std::bit_cast<double>(in.get_uint(8));
    params.add(std::move(name), Tensor::from_data(std::move(shape), std::move(values), true));
  }
  if (!in.at_end()) throw DataError("checkpoint: trailing bytes in " + path);
  return TransformerModel(cfg, std::move(params));
}

}  // namespace deepnorm
