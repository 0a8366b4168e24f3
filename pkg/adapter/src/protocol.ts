// Wire protocol between the broker and this adapter: newline-delimited JSON
// over stdio. Message shapes mirror the broker's published schema.

export interface ToolSchema {
  name: string;
  args: Record<string, string>;
}

export interface StepMessage {
  type: "step";
  run_id: string;
  task: string;
  tools: ToolSchema[];
  observations: [number, string][];
  step: number;
}

export interface EndMessage {
  type: "end";
  [key: string]: unknown;
}

export type BrokerMessage = StepMessage | EndMessage;

export interface ToolCallAction {
  type: "action";
  kind: "tool_call";
  tool: string;
  args: Record<string, string>;
}

export interface FinishAction {
  type: "action";
  kind: "finish";
  answer: string;
}

export type Action = ToolCallAction | FinishAction;

export function parseBrokerMessage(line: string): BrokerMessage {
  const message = JSON.parse(line);
  if (message === null || typeof message !== "object" || typeof message.type !== "string") {
    throw new Error(`not a broker message: ${line.slice(0, 120)}`);
  }
  if (message.type !== "step" && message.type !== "end") {
    throw new Error(`unknown broker message type: ${message.type}`);
  }
  return message as BrokerMessage;
}

// Field order is fixed so emitted lines are byte-stable for golden tests.
export function encodeAction(action: Action): string {
  if (action.kind === "tool_call") {
    return JSON.stringify({
      type: "action",
      kind: "tool_call",
      tool: action.tool,
      args: action.args,
    });
  }
  return JSON.stringify({ type: "action", kind: "finish", answer: action.answer });
}
