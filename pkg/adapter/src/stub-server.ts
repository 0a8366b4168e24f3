// Deterministic local stand-in for a chat-completions endpoint. Tests (and
// offline demos) point ADAPTER_BASE_URL here; replies are a pure function of
// the request, so recorded transcripts replay byte-for-byte.
//
// Behavior: a task containing "stub:read-then-finish" answers a read_file
// tool call until an observation appears, then finishes; anything else gets
// an immediate deterministic finish echoing the task line.

import { createServer, Server } from "node:http";

interface StubRequest {
  messages?: { role: string; content: string }[];
  tools?: unknown[];
}

export function stubReply(request: StubRequest): unknown {
  const user = (request.messages ?? []).filter((m) => m.role === "user").at(-1);
  const content = user?.content ?? "";
  const task = (content.match(/^Task: (.*)$/m) ?? [])[1] ?? "";
  const hasObservations = !/Observations so far:\nnone yet/.test(content);

  if (task.includes("stub:read-then-finish") && !hasObservations) {
    return completion({
      tool_calls: [
        {
          id: "call_0",
          type: "function",
          function: { name: "read_file", arguments: JSON.stringify({ path: "notes.txt" }) },
        },
      ],
      content: null,
    });
  }
  return completion({ content: `stub reply: ${task}`, tool_calls: undefined });
}

function completion(message: { content: string | null; tool_calls?: unknown[] }): unknown {
  return {
    id: "chatcmpl-stub",
    object: "chat.completion",
    model: "stub-model",
    choices: [{ index: 0, message: { role: "assistant", ...message }, finish_reason: "stop" }],
  };
}

export function startStubServer(port = 0): Promise<{ server: Server; url: string; requests: unknown[] }> {
  const requests: unknown[] = [];
  const server = createServer((req, res) => {
    let body = "";
    req.on("data", (chunk) => (body += chunk));
    req.on("end", () => {
      if (!req.url?.endsWith("/chat/completions")) {
        res.writeHead(404).end();
        return;
      }
      const parsed = JSON.parse(body) as StubRequest;
      requests.push(parsed);
      res.writeHead(200, { "content-type": "application/json" });
      res.end(JSON.stringify(stubReply(parsed)));
    });
  });
  return new Promise((resolve) => {
    server.listen(port, "127.0.0.1", () => {
      const address = server.address();
      const boundPort = typeof address === "object" && address ? address.port : port;
      resolve({ server, url: `http://127.0.0.1:${boundPort}/v1`, requests });
    });
  });
}

// Standalone mode: `node dist/stub-server.js 8123`
if (process.argv[1]?.endsWith("stub-server.js")) {
  const port = Number(process.argv[2] ?? 8123);
  startStubServer(port).then(({ url }) => {
    process.stderr.write(`stub model server at ${url}\n`);
  });
}
