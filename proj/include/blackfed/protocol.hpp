#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "blackfed/bytes.hpp"
#include "blackfed/tensor.hpp"
#include "blackfed/wire.hpp"

namespace blackfed {

inline constexpr std::uint16_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 9;  // "BFP1", type u8, length u32
inline constexpr std::size_t kMaxPayload = 256u * 1024u * 1024u;

enum class MessageType : std::uint8_t {
  hello = 1,
  features = 2,
  masks = 3,
  loss_reply = 4,
  prediction_reply = 5,
  begin_client_phase = 6,
  begin_server_phase = 7,
  end_session = 8,
  error = 9,
  begin_validation = 10,
  begin_inference = 11,
  ack = 12,
};

enum class ProtocolError : std::uint16_t {
  busy = 1,
  not_enrolled = 2,
  shape_mismatch = 3,
  version_mismatch = 4,
  bad_sequence = 5,
  non_finite = 6,
  internal = 7,
};

inline const char* to_string(ProtocolError e) {
  switch (e) {
    case ProtocolError::busy: return "BUSY";
    case ProtocolError::not_enrolled: return "NOT_ENROLLED";
    case ProtocolError::shape_mismatch: return "SHAPE_MISMATCH";
    case ProtocolError::version_mismatch: return "VERSION_MISMATCH";
    case ProtocolError::bad_sequence: return "BAD_SEQUENCE";
    case ProtocolError::non_finite: return "NON_FINITE";
    case ProtocolError::internal: return "INTERNAL";
  }
  return "UNKNOWN";
}

/// Which server weights answer an inference request.
enum class InferenceWeights : std::uint8_t {
  live = 1,        // current Phi (v1)
  checkpoint = 2,  // per-client snapshot (v2)
};

// The complete message schema. Payloads are activations, class-index masks,
// scalar losses, logits and control; no variant can carry model parameters
// or gradients.

struct Hello {
  std::uint32_t client_id = 0;
  std::uint16_t protocol_version = kProtocolVersion;
  Shape feature_shape;  // per-sample [64, H', W']
  friend bool operator==(const Hello&, const Hello&) = default;
};
struct Features {
  std::uint32_t batch_id = 0;
  Tensor<float> tensor;
  friend bool operator==(const Features&, const Features&) = default;
};
struct Masks {
  std::uint32_t batch_id = 0;
  Labels labels;
  friend bool operator==(const Masks&, const Masks&) = default;
};
struct LossReply {
  std::uint32_t batch_id = 0;
  float loss = 0.0f;
  friend bool operator==(const LossReply&, const LossReply&) = default;
};
struct PredictionReply {
  std::uint32_t batch_id = 0;
  Tensor<float> logits;
  friend bool operator==(const PredictionReply&, const PredictionReply&) = default;
};
struct BeginClientPhase {
  friend bool operator==(const BeginClientPhase&, const BeginClientPhase&) = default;
};
struct BeginServerPhase {
  friend bool operator==(const BeginServerPhase&, const BeginServerPhase&) = default;
};
struct BeginValidation {
  friend bool operator==(const BeginValidation&, const BeginValidation&) = default;
};
struct BeginInference {
  InferenceWeights weights = InferenceWeights::checkpoint;
  friend bool operator==(const BeginInference&, const BeginInference&) = default;
};
struct Ack {
  friend bool operator==(const Ack&, const Ack&) = default;
};
struct EndSession {
  friend bool operator==(const EndSession&, const EndSession&) = default;
};
struct ErrorMessage {
  ProtocolError code = ProtocolError::internal;
  std::string text;
  friend bool operator==(const ErrorMessage&, const ErrorMessage&) = default;
};

using SplitMessage = std::variant<Hello, Features, Masks, LossReply, PredictionReply, BeginClientPhase,
                                  BeginServerPhase, BeginValidation, BeginInference, Ack, EndSession, ErrorMessage>;

template <typename M>
constexpr MessageType type_of();
template <> constexpr MessageType type_of<Hello>() { return MessageType::hello; }
template <> constexpr MessageType type_of<Features>() { return MessageType::features; }
template <> constexpr MessageType type_of<Masks>() { return MessageType::masks; }
template <> constexpr MessageType type_of<LossReply>() { return MessageType::loss_reply; }
template <> constexpr MessageType type_of<PredictionReply>() { return MessageType::prediction_reply; }
template <> constexpr MessageType type_of<BeginClientPhase>() { return MessageType::begin_client_phase; }
template <> constexpr MessageType type_of<BeginServerPhase>() { return MessageType::begin_server_phase; }
template <> constexpr MessageType type_of<BeginValidation>() { return MessageType::begin_validation; }
template <> constexpr MessageType type_of<BeginInference>() { return MessageType::begin_inference; }
template <> constexpr MessageType type_of<Ack>() { return MessageType::ack; }
template <> constexpr MessageType type_of<EndSession>() { return MessageType::end_session; }
template <> constexpr MessageType type_of<ErrorMessage>() { return MessageType::error; }

inline MessageType message_type(const SplitMessage& msg) {
  return std::visit([](const auto& m) { return type_of<std::decay_t<decltype(m)>>(); }, msg);
}

inline const char* to_string(MessageType t) {
  switch (t) {
    case MessageType::hello: return "Hello";
    case MessageType::features: return "Features";
    case MessageType::masks: return "Masks";
    case MessageType::loss_reply: return "LossReply";
    case MessageType::prediction_reply: return "PredictionReply";
    case MessageType::begin_client_phase: return "BeginClientPhase";
    case MessageType::begin_server_phase: return "BeginServerPhase";
    case MessageType::end_session: return "EndSession";
    case MessageType::error: return "Error";
    case MessageType::begin_validation: return "BeginValidation";
    case MessageType::begin_inference: return "BeginInference";
    case MessageType::ack: return "Ack";
  }
  return "Unknown";
}

inline bool is_control(MessageType t) {
  switch (t) {
    case MessageType::begin_client_phase:
    case MessageType::begin_server_phase:
    case MessageType::begin_validation:
    case MessageType::begin_inference:
    case MessageType::ack:
    case MessageType::end_session: return true;
    default: return false;
  }
}

namespace detail {

inline void encode_payload(ByteWriter& w, const Hello& m) {
  w.u32(m.client_id);
  w.u16(m.protocol_version);
  write_shape(w, m.feature_shape);
}
inline void encode_payload(ByteWriter& w, const Features& m) {
  w.u32(m.batch_id);
  write_tensor(w, m.tensor);
}
inline void encode_payload(ByteWriter& w, const Masks& m) {
  w.u32(m.batch_id);
  write_tensor(w, m.labels);
}
inline void encode_payload(ByteWriter& w, const LossReply& m) {
  if (!std::isfinite(m.loss)) throw Error(ErrorCode::non_finite, "refusing to encode a non-finite loss");
  w.u32(m.batch_id);
  w.f32(m.loss);
}
inline void encode_payload(ByteWriter& w, const PredictionReply& m) {
  w.u32(m.batch_id);
  write_tensor(w, m.logits);
}
inline void encode_payload(ByteWriter& w, const BeginInference& m) { w.u8(static_cast<std::uint8_t>(m.weights)); }
inline void encode_payload(ByteWriter& w, const ErrorMessage& m) {
  w.u16(static_cast<std::uint16_t>(m.code));
  w.text(m.text);
}
template <typename Control>
void encode_payload(ByteWriter&, const Control&) {}

}  // namespace detail

/// Frame: "BFP1", message type u8, payload length u32 LE, payload.
inline std::vector<std::uint8_t> encode(const SplitMessage& msg) {
  ByteWriter w;
  w.text("BFP1");
  w.u8(static_cast<std::uint8_t>(message_type(msg)));
  w.u32(0);
  std::visit([&](const auto& m) { detail::encode_payload(w, m); }, msg);
  const std::size_t payload = w.size() - kFrameHeaderSize;
  if (payload > kMaxPayload) {
    throw Error(ErrorCode::protocol, "payload of " + std::to_string(payload) + " bytes exceeds the 256 MiB limit");
  }
  auto bytes = w.take();
  const auto len = static_cast<std::uint32_t>(payload);
  std::memcpy(bytes.data() + 5, &len, sizeof len);
  return bytes;
}

struct FrameHeader {
  MessageType type;
  std::uint32_t length;
};

inline FrameHeader decode_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, ErrorCode::protocol, "frame");
  char magic[4];
  r.raw(magic, 4);
  if (std::string_view(magic, 4) != "BFP1") throw Error(ErrorCode::protocol, "bad frame magic");
  const std::uint8_t type = r.u8();
  if (type < 1 || type > 12) throw Error(ErrorCode::protocol, "unknown message type " + std::to_string(type));
  const std::uint32_t length = r.u32();
  if (length > kMaxPayload) throw Error(ErrorCode::protocol, "payload length exceeds the 256 MiB limit");
  return {static_cast<MessageType>(type), length};
}

/// Decodes exactly one frame; truncated or over-long input is an error.
inline SplitMessage decode(std::span<const std::uint8_t> bytes) {
  const FrameHeader h = decode_header(bytes);
  if (bytes.size() < kFrameHeaderSize + h.length) throw Error(ErrorCode::protocol, "unexpected end of frame");
  if (bytes.size() > kFrameHeaderSize + h.length) throw Error(ErrorCode::protocol, "trailing bytes after frame");
  ByteReader r(bytes.subspan(kFrameHeaderSize), ErrorCode::protocol, "frame");
  SplitMessage msg;
  switch (h.type) {
    case MessageType::hello: {
      Hello m;
      m.client_id = r.u32();
      m.protocol_version = r.u16();
      m.feature_shape = detail::read_shape(r, ErrorCode::protocol);
      msg = std::move(m);
      break;
    }
    case MessageType::features: {
      Features m;
      m.batch_id = r.u32();
      m.tensor = read_real_tensor(r, ErrorCode::protocol);
      msg = std::move(m);
      break;
    }
    case MessageType::masks: {
      Masks m;
      m.batch_id = r.u32();
      m.labels = read_label_tensor(r, ErrorCode::protocol);
      msg = std::move(m);
      break;
    }
    case MessageType::loss_reply: {
      LossReply m;
      m.batch_id = r.u32();
      m.loss = r.f32();
      if (!std::isfinite(m.loss)) throw Error(ErrorCode::non_finite, "decoded loss is not finite");
      msg = m;
      break;
    }
    case MessageType::prediction_reply: {
      PredictionReply m;
      m.batch_id = r.u32();
      m.logits = read_real_tensor(r, ErrorCode::protocol);
      msg = std::move(m);
      break;
    }
    case MessageType::begin_client_phase: msg = BeginClientPhase{}; break;
    case MessageType::begin_server_phase: msg = BeginServerPhase{}; break;
    case MessageType::begin_validation: msg = BeginValidation{}; break;
    case MessageType::begin_inference: {
      const std::uint8_t w = r.u8();
      if (w != 1 && w != 2) throw Error(ErrorCode::protocol, "unknown inference weight selector");
      msg = BeginInference{static_cast<InferenceWeights>(w)};
      break;
    }
    case MessageType::ack: msg = Ack{}; break;
    case MessageType::end_session: msg = EndSession{}; break;
    case MessageType::error: {
      ErrorMessage m;
      m.code = static_cast<ProtocolError>(r.u16());
      auto text = r.bytes(r.remaining());
      m.text.assign(text.begin(), text.end());
      msg = std::move(m);
      break;
    }
  }
  if (r.remaining() != 0) throw Error(ErrorCode::protocol, "payload longer than its message");
  return msg;
}

/// Splits a byte stream into frames and decodes each.
inline std::vector<SplitMessage> decode_stream(std::span<const std::uint8_t> bytes) {
  std::vector<SplitMessage> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const FrameHeader h = decode_header(bytes.subspan(pos));
    const std::size_t n = kFrameHeaderSize + h.length;
    if (bytes.size() - pos < n) throw Error(ErrorCode::protocol, "unexpected end of frame");
    out.push_back(decode(bytes.subspan(pos, n)));
    pos += n;
  }
  return out;
}

/// Records every frame crossing a transport, byte for byte. With an
/// observer, frames are handed to it instead of being stored.
class WireTap {
 public:
  enum class Direction { to_server, to_client };
  using Observer = std::function<void(Direction, std::span<const std::uint8_t>)>;

  struct Frame {
    Direction direction;
    std::vector<std::uint8_t> bytes;
  };

  WireTap() = default;
  explicit WireTap(Observer observer) : observer_(std::move(observer)) {}

  void record(Direction d, std::span<const std::uint8_t> bytes) {
    if (observer_) {
      observer_(d, bytes);
    } else {
      frames_.push_back({d, {bytes.begin(), bytes.end()}});
    }
  }

  const std::vector<Frame>& frames() const { return frames_; }

  std::size_t total_bytes() const {
    std::size_t n = 0;
    for (const auto& f : frames_) n += f.bytes.size();
    return n;
  }

  std::vector<std::uint8_t> stream(Direction d) const {
    std::vector<std::uint8_t> out;
    for (const auto& f : frames_) {
      if (f.direction == d) out.insert(out.end(), f.bytes.begin(), f.bytes.end());
    }
    return out;
  }

 private:
  Observer observer_;
  std::vector<Frame> frames_;
};

/// Client end of an ordered, reliable, request-reply connection.
class Transport {
 public:
  virtual ~Transport() = default;

  void send(const SplitMessage& msg) {
    const std::vector<std::uint8_t> bytes = encode(msg);
    if (tap_) tap_->record(WireTap::Direction::to_server, bytes);
    send_bytes(bytes);
  }

  SplitMessage receive() {
    const std::vector<std::uint8_t> bytes = receive_bytes();
    if (tap_) tap_->record(WireTap::Direction::to_client, bytes);
    return decode(bytes);
  }

  void set_tap(WireTap* tap) { tap_ = tap; }

 protected:
  virtual void send_bytes(std::span<const std::uint8_t> frame) = 0;
  virtual std::vector<std::uint8_t> receive_bytes() = 0;

 private:
  WireTap* tap_ = nullptr;
};

/// Server-side request handler: zero or one reply per message.
class MessageHandler {
 public:
  virtual ~MessageHandler() = default;
  virtual std::optional<SplitMessage> handle(const SplitMessage& msg) = 0;
  /// Connection dropped without EndSession.
  virtual void on_disconnect() {}
};

/// Same-process transport. Frames are still encoded and decoded so the
/// in-process and TCP paths see identical bytes.
class InProcTransport : public Transport {
 public:
  explicit InProcTransport(MessageHandler& server) : server_(&server) {}

 protected:
  void send_bytes(std::span<const std::uint8_t> frame) override {
    std::optional<SplitMessage> reply = server_->handle(decode(frame));
    if (reply) pending_.push_back(encode(*reply));
  }

  std::vector<std::uint8_t> receive_bytes() override {
    if (pending_.empty()) throw Error(ErrorCode::session, "receive with no pending reply");
    std::vector<std::uint8_t> out = std::move(pending_.front());
    pending_.pop_front();
    return out;
  }

 private:
  MessageHandler* server_;
  std::deque<std::vector<std::uint8_t>> pending_;
};

}  // namespace blackfed
